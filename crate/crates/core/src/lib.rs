//! Transformer text classification for hierarchical sexism detection.
//!
//! The crate covers the whole pipeline on top of `edos-numcore`:
//!
//! - [`data`]: label taxonomy, CSV I/O, splitting, cleaning, synthetic data
//! - [`tokenizer`]: word-level vocabulary and fixed-length batches
//! - [`encoder`]: absolute and disentangled-attention transformer encoders
//! - [`heads`]: pooling, fusion and MLP heads, and [`heads::ModelBundle`]
//! - [`pretrain`]: masked-language-model domain-adaptive pretraining
//! - [`finetune`]: AdamW training for Tasks A, B, C and joint B
//! - [`inference`]: prediction, joint decision rule, hierarchical gating
//! - [`metrics`]: confusion matrices, macro F1 and error reports
//! - [`checkpoint`] and [`config`]: on-disk formats

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod heads;
pub mod inference;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pretrain;
pub mod tokenizer;
pub mod verify;

pub use error::{Error, Result};
