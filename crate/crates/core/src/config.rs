//! Experiment and pretraining configuration files (TOML).
//!
//! Every field has a documented default, printed in full by
//! [`ExperimentConfig::default_toml`] and [`PretrainConfig::default_toml`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::CleaningOptions;
use crate::encoder::{AttentionKind, EncoderConfig};
use crate::error::{Error, Result};
use crate::finetune::{Init, TrainConfig, TrainTask};
use crate::heads::{HeadConfig, HeadVariant, ModelBundle, Pooling};
use crate::pretrain::DaptConfig;

/// Encoder shape shared by every encoder of an experiment. The vocabulary
/// size comes from the vocabulary at run time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderShape {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub relative_clip: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl Default for EncoderShape {
    fn default() -> Self {
        let t = EncoderConfig::toy(AttentionKind::Absolute, 0);
        EncoderShape {
            n_layers: t.n_layers,
            n_heads: t.n_heads,
            d_model: t.d_model,
            d_ff: t.d_ff,
            max_len: t.max_len,
            relative_clip: t.relative_clip,
            dropout: t.dropout,
            layer_norm_eps: t.layer_norm_eps,
        }
    }
}

impl EncoderShape {
    pub fn build(&self, attention: AttentionKind, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            vocab_size,
            max_len: self.max_len,
            attention,
            relative_clip: self.relative_clip,
            dropout: self.dropout,
            layer_norm_eps: self.layer_norm_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadShape {
    pub branch_hidden: Vec<usize>,
    pub trunk_hidden: Vec<usize>,
    pub dropout: f64,
    pub pooling: Pooling,
}

impl Default for HeadShape {
    fn default() -> Self {
        let h = HeadConfig::new(HeadVariant::LastLayerMLP, 2);
        HeadShape {
            branch_hidden: h.branch_hidden,
            trunk_hidden: h.trunk_hidden,
            dropout: h.dropout,
            pooling: h.pooling,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub min_freq: usize,
    pub max_size: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            min_freq: 1,
            max_size: 30000,
        }
    }
}

/// Wiring fixed by an experiment id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Wiring {
    pub encoders: Vec<AttentionKind>,
    pub variant: HeadVariant,
    pub needs_dapt: bool,
    pub joint: bool,
}

/// 1–4 single encoders (last layer / layer average, absolute / disentangled),
/// 5 dual MLP-then-concat, 6 = 5 with pretrained init, 7 joint Task B,
/// 8 dual concat with pretrained init.
pub fn wiring(experiment: u8) -> Result<Wiring> {
    use AttentionKind::{Absolute as Abs, Disentangled as Dis};
    use HeadVariant::*;
    let w = |encoders: Vec<AttentionKind>, variant, needs_dapt, joint| Wiring {
        encoders,
        variant,
        needs_dapt,
        joint,
    };
    Ok(match experiment {
        1 => w(vec![Abs], LastLayerMLP, false, false),
        2 => w(vec![Dis], LastLayerMLP, false, false),
        3 => w(vec![Abs], AvgLayersMLP, false, false),
        4 => w(vec![Dis], AvgLayersMLP, false, false),
        5 => w(vec![Abs, Dis], DualMLPConcatMLP, false, false),
        6 => w(vec![Abs, Dis], DualMLPConcatMLP, true, false),
        7 => w(vec![Abs, Dis], DualMLPConcatMLP, false, true),
        8 => w(vec![Abs, Dis], DualConcatMLP, true, false),
        other => {
            return Err(Error::Config(format!(
                "experiment must be 1..=8, got {other}"
            )))
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: u8,
    pub seed: u64,
    pub encoder: EncoderShape,
    pub head: HeadShape,
    pub train: TrainConfig,
    pub vocab: VocabConfig,
    pub cleaning: CleaningOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: 1,
            seed: 0,
            encoder: EncoderShape::default(),
            head: HeadShape::default(),
            train: TrainConfig::default(),
            vocab: VocabConfig::default(),
            cleaning: CleaningOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn default_toml() -> String {
        Self::default().to_toml().expect("defaults serialise")
    }

    /// Resolves the training task for this experiment. Experiment 7 only
    /// accepts Task B and trains it jointly.
    pub fn resolve_task(&self, requested: TrainTask) -> Result<TrainTask> {
        let w = wiring(self.experiment)?;
        match (w.joint, requested) {
            (true, TrainTask::B | TrainTask::BJoint) => Ok(TrainTask::BJoint),
            (true, t) => Err(Error::Config(format!(
                "experiment 7 is joint learning for Task B; Task {t} is not allowed"
            ))),
            (false, TrainTask::BJoint) => Err(Error::Config(
                "joint Task B training is experiment 7".into(),
            )),
            (false, t) => Ok(t),
        }
    }

    /// Model for `task` over a vocabulary of `vocab_size` entries.
    pub fn bundle(&self, task: TrainTask, vocab_size: usize) -> Result<ModelBundle> {
        let w = wiring(self.experiment)?;
        let mut encs = w
            .encoders
            .iter()
            .map(|&k| self.encoder.build(k, vocab_size));
        let a = encs.next().expect("at least one encoder");
        let b = encs.next();
        let head = HeadConfig {
            variant: w.variant,
            branch_hidden: self.head.branch_hidden.clone(),
            trunk_hidden: self.head.trunk_hidden.clone(),
            num_classes: task.num_classes(),
            dropout: self.head.dropout,
            pooling: self.head.pooling,
        };
        ModelBundle::new(a, b, head)
    }

    /// Init mode implied by the experiment.
    pub fn init_mode(&self) -> Result<Init> {
        Ok(if wiring(self.experiment)?.needs_dapt {
            Init::FromDaptCheckpoint
        } else {
            self.train.init
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub seed: u64,
    pub attention: AttentionKind,
    pub encoder: EncoderShape,
    pub dapt: DaptConfig,
    pub vocab: VocabConfig,
    pub cleaning: CleaningOptions,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            seed: 0,
            attention: AttentionKind::Absolute,
            encoder: EncoderShape::default(),
            dapt: DaptConfig::default(),
            vocab: VocabConfig::default(),
            cleaning: CleaningOptions::default(),
        }
    }
}

impl PretrainConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn default_toml() -> String {
        Self::default().to_toml().expect("defaults serialise")
    }
}
