//! Post-LN transformer encoders with absolute or disentangled relative
//! position attention.
//!
//! Parameters live in a shared [`ParamStore`] under a name prefix, so one
//! store can hold two encoders and a head. Names below are relative to it:
//!
//! | name | shape | kind |
//! |------|-------|------|
//! | `tok_emb` | `[V, d]` | both |
//! | `pos_emb` | `[max_len, d]` | absolute |
//! | `rel_emb` | `[2k+1, d]` | disentangled |
//! | `emb_ln.{g,b}` | `[d]` | both |
//! | `l{i}.{wq,wv,wo}.{w,b}`, `l{i}.wk` | `[d, d]` | both |
//! | `l{i}.{wqr,wkr}` | `[d, d]` | disentangled |
//! | `l{i}.ff1.{w,b}`, `l{i}.ff2.{w,b}` | `[d, d_ff]`, `[d_ff, d]` | both |
//! | `l{i}.{ln1,ln2}.{g,b}` | `[d]` | both |
//!
//! The key projection has no bias: under softmax a per-key constant shifts a
//! whole row of logits, so its gradient would be identically zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_layer_norm, init_linear, init_normal, Fwd};
use crate::tokenizer::TokenBatch;
use edos_numcore::{ParamStore, RngHandle, Scalar, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Absolute,
    Disentangled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub attention: AttentionKind,
    /// Relative distances are clipped to `[-k, k]` (disentangled only).
    pub relative_clip: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl EncoderConfig {
    /// 4 layers, 4 heads, width 128, FFN 512.
    pub fn toy(attention: AttentionKind, vocab_size: usize) -> Self {
        EncoderConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            vocab_size,
            max_len: 64,
            attention,
            relative_clip: 8,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
        }
    }

    /// Full-size shape: 12 layers, 12 heads, width 768.
    pub fn base(attention: AttentionKind, vocab_size: usize) -> Self {
        EncoderConfig {
            n_layers: 12,
            n_heads: 12,
            d_model: 768,
            d_ff: 3072,
            ..Self::toy(attention, vocab_size)
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff == 0 {
            return fail("d_ff must be positive".into());
        }
        if self.vocab_size <= crate::tokenizer::NUM_SPECIAL as usize {
            return fail(format!(
                "vocab_size {} leaves no room for words",
                self.vocab_size
            ));
        }
        if self.max_len < 3 {
            return fail("max_len must be at least 3".into());
        }
        if self.attention == AttentionKind::Disentangled && self.relative_clip < 1 {
            return fail("relative_clip must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.layer_norm_eps > 0.0) {
            return fail("layer_norm_eps must be positive".into());
        }
        Ok(())
    }
}

/// Embedding output followed by each layer's output, all `[B, T, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates(pub Vec<Var>);

impl HiddenStates {
    pub fn last(&self) -> Var {
        *self.0.last().expect("at least the embedding output")
    }

    pub fn n_layers(&self) -> usize {
        self.0.len() - 1
    }
}

/// `clip(i - j, -k, k) + k` for every query `i` and key `j`.
pub fn relative_index(t: usize, k: usize) -> Vec<usize> {
    let k = k as isize;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t as isize {
        for j in 0..t as isize {
            idx.push(((i - j).clamp(-k, k) + k) as usize);
        }
    }
    idx
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub prefix: String,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, prefix: impl Into<String>) -> Result<Self> {
        cfg.validate()?;
        Ok(Encoder {
            cfg,
            prefix: prefix.into(),
        })
    }

    pub fn name(&self, rel: &str) -> String {
        format!("{}{rel}", self.prefix)
    }

    /// Normal(0, 0.02) weights, zero biases, unit layer-norm gains.
    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut RngHandle) -> Result<()> {
        let c = &self.cfg;
        let d = c.d_model;
        init_normal(store, self.name("tok_emb"), &[c.vocab_size, d], rng)?;
        match c.attention {
            AttentionKind::Absolute => {
                init_normal(store, self.name("pos_emb"), &[c.max_len, d], rng)?
            }
            AttentionKind::Disentangled => init_normal(
                store,
                self.name("rel_emb"),
                &[2 * c.relative_clip + 1, d],
                rng,
            )?,
        }
        init_layer_norm(store, &self.name("emb_ln"), d)?;
        for l in 0..c.n_layers {
            let p = |s: &str| self.name(&format!("l{l}.{s}"));
            init_linear(store, &p("wq"), d, d, rng)?;
            init_normal(store, p("wk"), &[d, d], rng)?;
            init_linear(store, &p("wv"), d, d, rng)?;
            if c.attention == AttentionKind::Disentangled {
                init_normal(store, p("wqr"), &[d, d], rng)?;
                init_normal(store, p("wkr"), &[d, d], rng)?;
            }
            init_linear(store, &p("wo"), d, d, rng)?;
            init_layer_norm(store, &p("ln1"), d)?;
            init_linear(store, &p("ff1"), d, c.d_ff, rng)?;
            init_linear(store, &p("ff2"), c.d_ff, d, rng)?;
            init_layer_norm(store, &p("ln2"), d)?;
        }
        Ok(())
    }

    /// Token embedding (plus absolute positions), layer norm, dropout.
    pub fn embed<F: Scalar>(&self, f: &mut Fwd<'_, F>, batch: &TokenBatch) -> Result<Var> {
        let (b, t) = (batch.batch, batch.len);
        if t > self.cfg.max_len {
            return Err(Error::Invalid(format!(
                "sequence length {t} exceeds max_len {}",
                self.cfg.max_len
            )));
        }
        let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let table = f.p(&self.name("tok_emb"))?;
        let mut h = f.g.embedding(table, &ids, &[b, t])?;
        if self.cfg.attention == AttentionKind::Absolute {
            let pos = f.p(&self.name("pos_emb"))?;
            let positions: Vec<usize> = (0..t).collect();
            let p = f.g.embedding(pos, &positions, &[t])?;
            h = f.g.add(h, p)?;
        }
        let h = f.layer_norm(h, &self.name("emb_ln"), self.cfg.layer_norm_eps)?;
        Ok(f.dropout(h, self.cfg.dropout))
    }

    /// `[B, T, d]` → `[B, heads, T, d_head]`.
    fn split_heads<F: Scalar>(&self, f: &mut Fwd<'_, F>, x: Var) -> Result<Var> {
        let s = f.g.shape(x).to_vec();
        let (h, dh) = (self.cfg.n_heads, self.cfg.d_head());
        let x = f.g.reshape(x, &[s[0], s[1], h, dh])?;
        Ok(f.g.permute(x, &[0, 2, 1, 3])?)
    }

    /// `[R, d]` → `[heads, R, d_head]`.
    fn split_heads_rel<F: Scalar>(&self, f: &mut Fwd<'_, F>, x: Var) -> Result<Var> {
        let r = f.g.shape(x)[0];
        let (h, dh) = (self.cfg.n_heads, self.cfg.d_head());
        let x = f.g.reshape(x, &[r, h, dh])?;
        Ok(f.g.permute(x, &[1, 0, 2])?)
    }

    /// Multi-head attention of layer `l` over `h` (`[B, T, d]`), output
    /// projected back to `[B, T, d]`. Padded keys get [`edos_numcore::MASK_BIAS`].
    pub fn attention<F: Scalar>(
        &self,
        f: &mut Fwd<'_, F>,
        l: usize,
        h: Var,
        key_mask: &[bool],
    ) -> Result<Var> {
        let p = |s: &str| self.name(&format!("l{l}.{s}"));
        let s = f.g.shape(h).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let dh = self.cfg.d_head() as f64;

        let q = f.linear(h, &p("wq"))?;
        let k = f.project(h, &p("wk"))?;
        let v = f.linear(h, &p("wv"))?;
        let q = self.split_heads(f, q)?;
        let k = self.split_heads(f, k)?;
        let v = self.split_heads(f, v)?;

        let c2c = f.g.matmul_t(q, k)?;
        let logits = match self.cfg.attention {
            AttentionKind::Absolute => f.g.scale(c2c, 1.0 / dh.sqrt()),
            AttentionKind::Disentangled => {
                let kc = self.cfg.relative_clip;
                let idx = relative_index(t, kc);
                let rel = f.p(&self.name("rel_emb"))?;
                let kr = f.project(rel, &p("wkr"))?;
                let qr = f.project(rel, &p("wqr"))?;
                let kr = self.split_heads_rel(f, kr)?;
                let qr = self.split_heads_rel(f, qr)?;
                // content → position: Qc_i · Kr[δ(i, j)]
                let c2p = f.g.matmul_t(q, kr)?;
                let c2p = f.g.rel_gather(c2p, &idx, t)?;
                // position → content: Kc_j · Qr[δ(j, i)], gathered per key then transposed
                let p2c = f.g.matmul_t(k, qr)?;
                let p2c = f.g.rel_gather(p2c, &idx, t)?;
                let p2c = f.g.transpose_last2(p2c)?;
                let sum = f.g.add(c2c, c2p)?;
                let sum = f.g.add(sum, p2c)?;
                f.g.scale(sum, 1.0 / (3.0 * dh).sqrt())
            }
        };
        let logits = f.g.key_mask(logits, key_mask)?;
        let probs = f.g.softmax(logits)?;
        let probs = f.dropout(probs, self.cfg.dropout);
        let ctx = f.g.matmul(probs, v)?;
        let ctx = f.g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = f.g.reshape(ctx, &[b, t, d])?;
        Ok(f.linear(ctx, &p("wo"))?)
    }

    /// Attention and FFN sublayers, each with residual and post layer norm.
    pub fn layer<F: Scalar>(
        &self,
        f: &mut Fwd<'_, F>,
        l: usize,
        h: Var,
        key_mask: &[bool],
    ) -> Result<Var> {
        let p = |s: &str| self.name(&format!("l{l}.{s}"));
        let eps = self.cfg.layer_norm_eps;
        let a = self.attention(f, l, h, key_mask)?;
        let a = f.dropout(a, self.cfg.dropout);
        let h = f.g.add(h, a)?;
        let h = f.layer_norm(h, &p("ln1"), eps)?;
        let x = f.linear(h, &p("ff1"))?;
        let x = f.g.gelu(x);
        let x = f.linear(x, &p("ff2"))?;
        let x = f.dropout(x, self.cfg.dropout);
        let h = f.g.add(h, x)?;
        Ok(f.layer_norm(h, &p("ln2"), eps)?)
    }

    pub fn forward<F: Scalar>(
        &self,
        f: &mut Fwd<'_, F>,
        batch: &TokenBatch,
    ) -> Result<HiddenStates> {
        let mut states = Vec::with_capacity(self.cfg.n_layers + 1);
        let mut h = self.embed(f, batch)?;
        states.push(h);
        for l in 0..self.cfg.n_layers {
            h = self.layer(f, l, h, &batch.mask)?;
            states.push(h);
        }
        Ok(HiddenStates(states))
    }
}
