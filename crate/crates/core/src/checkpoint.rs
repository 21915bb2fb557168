//! Binary checkpoint format.
//!
//! ```text
//! "EDOSCKPT" | u32 version | u64 metadata length | metadata (UTF-8 JSON) | payload
//! ```
//!
//! All integers are little-endian. The metadata holds the model description,
//! the vocabulary, an optional experiment config and a tensor directory of
//! `(name, dtype, shape, offset)` entries whose offsets index the payload.
//! Tensors are stored in parameter-store order as little-endian floats, so a
//! save/load round trip is bit exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::finetune::TrainTask;
use crate::heads::ModelBundle;
use crate::tokenizer::Vocabulary;
use edos_numcore::{DType, ParamStore, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"EDOSCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Classifier {
        bundle: ModelBundle,
        task: TrainTask,
        max_len: usize,
        experiment: Option<u8>,
    },
    Mlm {
        encoder: EncoderConfig,
        max_len: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    model: ModelSpec,
    vocab: Vocabulary,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<F> {
    pub model: ModelSpec,
    pub vocab: Vocabulary,
    /// Free-form experiment configuration kept for provenance.
    pub config: serde_json::Value,
    pub store: ParamStore<F>,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::with_capacity(self.store.len());
        let mut payload = Vec::with_capacity(self.store.num_elements() * F::DTYPE.size_of());
        for (name, p) in self.store.iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                dtype: F::DTYPE.as_str().to_string(),
                shape: p.value.shape().to_vec(),
                offset: payload.len() as u64,
            });
            for &x in p.value.data() {
                x.write_le(&mut payload);
            }
        }
        let meta = Metadata {
            model: self.model.clone(),
            vocab: self.vocab.clone(),
            config: self.config.clone(),
            tensors,
        };
        let meta = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(20 + meta.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parses a checkpoint; tensors stored in another precision are converted.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let meta_end = 20usize
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated metadata"))?;
        let meta: Metadata = serde_json::from_slice(&bytes[20..meta_end])?;
        let payload = &bytes[meta_end..];

        let mut store = ParamStore::new();
        let mut expected_offset = 0u64;
        for t in &meta.tensors {
            let dtype = DType::parse(&t.dtype)
                .ok_or_else(|| Error::Checkpoint(format!("unknown dtype `{}`", t.dtype)))?;
            let n: usize = t.shape.iter().product();
            let width = dtype.size_of();
            if t.offset != expected_offset {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has a gap or overlap",
                    t.name
                )));
            }
            let start = t.offset as usize;
            let end = start + n * width;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` is truncated",
                    t.name
                )));
            }
            let raw = &payload[start..end];
            let data: Vec<F> = match dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| F::from_f64_lossy(f32::read_le(c) as f64))
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| F::from_f64_lossy(f64::read_le(c)))
                    .collect(),
            };
            store.insert(t.name.clone(), Tensor::from_vec(&t.shape, data)?)?;
            expected_offset = end as u64;
        }
        if expected_offset as usize != payload.len() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        Ok(Checkpoint {
            model: meta.model,
            vocab: meta.vocab,
            config: meta.config,
            store,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| {
            Error::Checkpoint(format!("cannot read {}: {e}", path.as_ref().display()))
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::AttentionKind;

    fn sample<F: Scalar>() -> Checkpoint<F> {
        let mut store = ParamStore::new();
        store
            .insert(
                "a",
                Tensor::from_f64(&[2, 2], &[1.0, -0.1, 3.5e-8, 7.0]).unwrap(),
            )
            .unwrap();
        store
            .insert("b", Tensor::from_f64(&[3], &[0.2, 0.3, 1e30]).unwrap())
            .unwrap();
        Checkpoint {
            model: ModelSpec::Mlm {
                encoder: EncoderConfig::toy(AttentionKind::Absolute, 8),
                max_len: 64,
            },
            vocab: Vocabulary::from_tokens(vec!["x".into(), "y".into()]).unwrap(),
            config: serde_json::json!({"seed": 3}),
            store,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        for_dtype::<f32>();
        for_dtype::<f64>();
    }

    fn for_dtype<F: Scalar>() {
        let c = sample::<F>();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::<F>::from_bytes(&bytes).unwrap();
        assert!(back.store.bit_eq(&c.store));
        assert_eq!(back.model, c.model);
        assert_eq!(back.vocab, c.vocab);
        assert_eq!(back.config, c.config);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_input_rejected() {
        let bytes = sample::<f32>().to_bytes().unwrap();
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::<f32>::from_bytes(&extra).is_err());
    }
}
