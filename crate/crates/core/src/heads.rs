//! Pooling, fusion and MLP classification heads, and the [`ModelBundle`]
//! that wires one or two encoders to a head.

use serde::{Deserialize, Serialize};

use crate::encoder::{AttentionKind, Encoder, EncoderConfig, HiddenStates};
use crate::error::{Error, Result};
use crate::nn::{init_linear, init_mlp, Fwd};
use crate::tokenizer::TokenBatch;
use edos_numcore::{Graph, ParamStore, RngHandle, Scalar, Var};

pub const ENC_A: &str = "enc_a.";
pub const ENC_B: &str = "enc_b.";
pub const HEAD: &str = "head.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadVariant {
    LastLayerMLP,
    AvgLayersMLP,
    DualConcatMLP,
    DualMLPConcatMLP,
}

impl HeadVariant {
    pub fn is_dual(self) -> bool {
        matches!(
            self,
            HeadVariant::DualConcatMLP | HeadVariant::DualMLPConcatMLP
        )
    }
}

/// How a layer's `[B, T, d]` output becomes one vector per example.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Cls,
    /// Mean over non-pad positions.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub variant: HeadVariant,
    pub branch_hidden: Vec<usize>,
    pub trunk_hidden: Vec<usize>,
    pub num_classes: usize,
    pub dropout: f64,
    #[serde(default)]
    pub pooling: Pooling,
}

impl HeadConfig {
    pub fn new(variant: HeadVariant, num_classes: usize) -> Self {
        HeadConfig {
            variant,
            branch_hidden: vec![256],
            trunk_hidden: vec![256],
            num_classes,
            dropout: 0.1,
            pooling: Pooling::Cls,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if ![2, 4, 5, 11].contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes must be 2, 4, 5 or 11, got {}",
                self.num_classes
            )));
        }
        if self.branch_hidden.contains(&0) || self.trunk_hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Position-0 vector of the final layer: `[B, T, d]` → `[B, d]`.
pub fn pool_last<F: Scalar>(g: &mut Graph<F>, h: &HiddenStates) -> Result<Var> {
    Ok(g.index_axis(h.last(), 1, 0)?)
}

/// Mean of the position-0 vectors of layers 1..=n, leaving out the embedding output.
pub fn pool_avg<F: Scalar>(g: &mut Graph<F>, h: &HiddenStates) -> Result<Var> {
    if h.n_layers() == 0 {
        return Err(Error::Invalid(
            "pool_avg needs at least one transformer layer".into(),
        ));
    }
    let cls: Vec<Var> = h.0[1..]
        .iter()
        .map(|&s| g.index_axis(s, 1, 0))
        .collect::<std::result::Result<_, _>>()?;
    let b = g.shape(cls[0])[0];
    let d = g.shape(cls[0])[1];
    let stacked = g.concat(&cls)?;
    let stacked = g.reshape(stacked, &[b, cls.len(), d])?;
    Ok(g.mean(stacked, 1)?)
}

/// Mean over non-pad positions of one layer.
pub fn pool_mean_tokens<F: Scalar>(g: &mut Graph<F>, layer: Var, mask: &[bool]) -> Result<Var> {
    let s = g.shape(layer).to_vec();
    let (b, t) = (s[0], s[1]);
    let mut w = Vec::with_capacity(b * t);
    for r in 0..b {
        let row = &mask[r * t..(r + 1) * t];
        let n = row.iter().filter(|&&m| m).count().max(1) as f64;
        w.extend(row.iter().map(|&m| if m { 1.0 / n } else { 0.0 }));
    }
    let w = g.constant(edos_numcore::Tensor::from_f64(&[b, 1, t], &w)?);
    let pooled = g.matmul(w, layer)?;
    Ok(g.reshape(pooled, &[b, s[2]])?)
}

/// Encoder A's vector first, then encoder B's.
pub fn fuse_concat<F: Scalar>(g: &mut Graph<F>, ha: Var, hb: Var) -> Result<Var> {
    Ok(g.concat(&[ha, hb])?)
}

/// Separate MLP per branch, then concatenation.
pub fn fuse_mlp_then_concat<F: Scalar>(
    f: &mut Fwd<'_, F>,
    ha: Var,
    hb: Var,
    branch_layers: usize,
    dropout: f64,
) -> Result<Var> {
    let a = f.mlp(ha, &format!("{HEAD}branch_a"), branch_layers, dropout)?;
    let b = f.mlp(hb, &format!("{HEAD}branch_b"), branch_layers, dropout)?;
    fuse_concat(f.g, a, b)
}

/// Trunk MLP then the final linear layer; returns logits.
pub fn classify<F: Scalar>(f: &mut Fwd<'_, F>, x: Var, cfg: &HeadConfig) -> Result<Var> {
    let x = f.mlp(
        x,
        &format!("{HEAD}trunk"),
        cfg.trunk_hidden.len(),
        cfg.dropout,
    )?;
    Ok(f.linear(x, &format!("{HEAD}out"))?)
}

/// One or two encoders plus a classification head. Parameters are kept in
/// a separate [`ParamStore`] under the `enc_a.`, `enc_b.` and `head.` prefixes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub encoder_a: EncoderConfig,
    pub encoder_b: Option<EncoderConfig>,
    pub head: HeadConfig,
}

impl ModelBundle {
    pub fn new(
        encoder_a: EncoderConfig,
        encoder_b: Option<EncoderConfig>,
        head: HeadConfig,
    ) -> Result<Self> {
        let m = ModelBundle {
            encoder_a,
            encoder_b,
            head,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_a.validate()?;
        self.head.validate()?;
        match (&self.encoder_b, self.head.variant.is_dual()) {
            (Some(b), true) => {
                b.validate()?;
                if b.vocab_size != self.encoder_a.vocab_size {
                    return Err(Error::Config(
                        "both encoders must share one vocabulary".into(),
                    ));
                }
                Ok(())
            }
            (None, false) => Ok(()),
            (None, true) => Err(Error::Config(format!(
                "{:?} needs a second encoder",
                self.head.variant
            ))),
            (Some(_), false) => Err(Error::Config(format!(
                "{:?} takes a single encoder",
                self.head.variant
            ))),
        }
    }

    pub fn encoders(&self) -> Vec<Encoder> {
        let mut out = vec![Encoder {
            cfg: self.encoder_a.clone(),
            prefix: ENC_A.into(),
        }];
        if let Some(b) = &self.encoder_b {
            out.push(Encoder {
                cfg: b.clone(),
                prefix: ENC_B.into(),
            });
        }
        out
    }

    /// Encoder slot prefix holding the given attention kind, if any.
    pub fn slot_for(&self, kind: AttentionKind) -> Vec<&'static str> {
        let mut slots = Vec::new();
        if self.encoder_a.attention == kind {
            slots.push(ENC_A);
        }
        if self.encoder_b.as_ref().is_some_and(|b| b.attention == kind) {
            slots.push(ENC_B);
        }
        slots
    }

    pub fn init<F: Scalar>(&self, rng: &mut RngHandle) -> Result<ParamStore<F>> {
        self.validate()?;
        let mut store = ParamStore::new();
        for enc in self.encoders() {
            enc.init(&mut store, rng)?;
        }
        let cfg = &self.head;
        let da = self.encoder_a.d_model;
        let d_fused = match cfg.variant {
            HeadVariant::LastLayerMLP | HeadVariant::AvgLayersMLP => da,
            HeadVariant::DualConcatMLP => da + self.encoder_b.as_ref().expect("validated").d_model,
            HeadVariant::DualMLPConcatMLP => {
                let db = self.encoder_b.as_ref().expect("validated").d_model;
                let wa = init_mlp(
                    &mut store,
                    &format!("{HEAD}branch_a"),
                    da,
                    &cfg.branch_hidden,
                    rng,
                )?;
                let wb = init_mlp(
                    &mut store,
                    &format!("{HEAD}branch_b"),
                    db,
                    &cfg.branch_hidden,
                    rng,
                )?;
                wa + wb
            }
        };
        let d = init_mlp(
            &mut store,
            &format!("{HEAD}trunk"),
            d_fused,
            &cfg.trunk_hidden,
            rng,
        )?;
        init_linear(&mut store, &format!("{HEAD}out"), d, cfg.num_classes, rng)?;
        Ok(store)
    }

    fn pool<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        h: &HiddenStates,
        batch: &TokenBatch,
    ) -> Result<Var> {
        match (self.head.variant, self.head.pooling) {
            (HeadVariant::AvgLayersMLP, _) => pool_avg(g, h),
            (_, Pooling::Cls) => pool_last(g, h),
            (_, Pooling::Mean) => pool_mean_tokens(g, h.last(), &batch.mask),
        }
    }

    /// Fused representation fed to the trunk, `[B, d_fused]`.
    pub fn features<F: Scalar>(&self, f: &mut Fwd<'_, F>, batch: &TokenBatch) -> Result<Var> {
        let encs = self.encoders();
        let ha = encs[0].forward(f, batch)?;
        let pa = self.pool(f.g, &ha, batch)?;
        match self.head.variant {
            HeadVariant::LastLayerMLP | HeadVariant::AvgLayersMLP => Ok(pa),
            HeadVariant::DualConcatMLP | HeadVariant::DualMLPConcatMLP => {
                let hb = encs[1].forward(f, batch)?;
                let pb = self.pool(f.g, &hb, batch)?;
                if self.head.variant == HeadVariant::DualConcatMLP {
                    fuse_concat(f.g, pa, pb)
                } else {
                    fuse_mlp_then_concat(
                        f,
                        pa,
                        pb,
                        self.head.branch_hidden.len(),
                        self.head.dropout,
                    )
                }
            }
        }
    }

    /// Class logits `[B, num_classes]`.
    pub fn logits<F: Scalar>(&self, f: &mut Fwd<'_, F>, batch: &TokenBatch) -> Result<Var> {
        let x = self.features(f, batch)?;
        classify(f, x, &self.head)
    }

    /// Names of encoder parameters (used to freeze encoders).
    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with(ENC_A) || name.starts_with(ENC_B)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc(kind: AttentionKind) -> EncoderConfig {
        EncoderConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            ..EncoderConfig::toy(kind, 20)
        }
    }

    #[test]
    fn dual_needs_two_encoders() {
        let h = HeadConfig::new(HeadVariant::DualConcatMLP, 2);
        assert!(ModelBundle::new(enc(AttentionKind::Absolute), None, h.clone()).is_err());
        assert!(ModelBundle::new(
            enc(AttentionKind::Absolute),
            Some(enc(AttentionKind::Disentangled)),
            h
        )
        .is_ok());
        let single = HeadConfig::new(HeadVariant::LastLayerMLP, 2);
        assert!(ModelBundle::new(
            enc(AttentionKind::Absolute),
            Some(enc(AttentionKind::Disentangled)),
            single
        )
        .is_err());
        assert!(HeadConfig::new(HeadVariant::LastLayerMLP, 3)
            .validate()
            .is_err());
    }
}
