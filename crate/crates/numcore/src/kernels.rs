//! Dense kernels with an optional rayon path.
//!
//! Every output element is produced by exactly one task and accumulated in a
//! fixed order, so the parallel and sequential paths are bitwise identical.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::scalar::Scalar;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many multiply-adds a gemm stays on the calling thread.
pub const PAR_MIN_WORK: usize = 1 << 16;

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Enables or disables the rayon path at runtime. No-op without the `parallel` feature.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// `c[m×n] += a[m×k] · b[k×n]`, dispatching on size and the runtime switch.
pub fn gemm<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    #[cfg(feature = "parallel")]
    if parallel_enabled() && m * k * n >= PAR_MIN_WORK && m > 1 {
        gemm_par(m, k, n, a, b, c);
        return;
    }
    gemm_seq(m, k, n, a, b, c);
}

pub fn gemm_seq<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm_rows(k, n, a, b, c);
}

#[cfg(feature = "parallel")]
pub fn gemm_par<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let rows_per_task = (PAR_MIN_WORK / (k * n).max(1)).clamp(1, m);
    c.par_chunks_mut(rows_per_task * n)
        .zip(a.par_chunks(rows_per_task * k))
        .for_each(|(c_blk, a_blk)| gemm_rows(k, n, a_blk, b, c_blk));
}

/// Row kernel. Four rows of `a` share each pass over a row of `b`; every
/// `c[i][j]` still accumulates over `p` in increasing order.
fn gemm_rows<F: Scalar>(k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    let rows = c.len() / n;
    let mut i = 0;
    while i + 4 <= rows {
        let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let a2 = &a[(i + 2) * k..(i + 3) * k];
        let a3 = &a[(i + 3) * k..(i + 4) * k];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let (x0, x1, x2, x3) = (a0[p], a1[p], a2[p], a3[p]);
            for j in 0..n {
                let bv = b_row[j];
                c0[j] = c0[j] + x0 * bv;
                c1[j] = c1[j] + x1 * bv;
                c2[j] = c2[j] + x2 * bv;
                c3[j] = c3[j] + x3 * bv;
            }
        }
        i += 4;
    }
    while i < rows {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let x = a_row[p];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + x * bv;
            }
        }
        i += 1;
    }
}

/// Transposes a row-major `rows×cols` matrix.
pub fn transpose<F: Scalar>(rows: usize, cols: usize, src: &[F]) -> Vec<F> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut out = vec![F::zero(); rows * cols];
    const BLOCK: usize = 32;
    for ib in (0..rows).step_by(BLOCK) {
        for jb in (0..cols).step_by(BLOCK) {
            for i in ib..(ib + BLOCK).min(rows) {
                for j in jb..(jb + BLOCK).min(cols) {
                    out[j * rows + i] = src[i * cols + j];
                }
            }
        }
    }
    out
}

/// Maps `f` over `items` in parallel when enabled; output order matches input order.
pub fn par_map<T, U, M>(items: &[T], f: M) -> Vec<U>
where
    T: Sync,
    U: Send,
    M: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}
