//! Seeded, splittable random streams.
//!
//! ChaCha is counter based: `(seed, stream)` names an independent sequence,
//! so callers can derive per-epoch or per-purpose generators without sharing
//! state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RngHandle = ChaCha8Rng;

/// Generator for stream `stream` under `seed`.
pub fn stream(seed: u64, stream: u64) -> RngHandle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stable 64-bit label for a purpose string, usable as a stream id.
pub fn stream_id(label: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
