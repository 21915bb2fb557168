//! Masked-language-model pretraining of a single encoder.
//!
//! The output projection is the transposed token embedding of the encoder
//! (bound once per graph, so both uses share one gradient) plus a bias
//! `mlm.bias`.

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::Fwd;
use crate::optim::{AdamW, AdamWConfig};
use crate::tokenizer::{TokenBatch, Vocabulary, CLS, MASK, NUM_SPECIAL, PAD, SEP};
use edos_numcore::rng::{self, RngHandle};
use edos_numcore::{Graph, ParamStore, Scalar, Tensor, Var};

pub const ENC: &str = "enc.";
pub const MLM_BIAS: &str = "mlm.bias";

/// Corrupted inputs and the original ids at corrupted positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlmBatch {
    /// Corrupted ids; the attention mask is that of the uncorrupted batch.
    pub input: TokenBatch,
    /// Per position, the original id where the position was selected.
    pub targets: Vec<Option<u32>>,
}

impl MlmBatch {
    pub fn num_targets(&self) -> usize {
        self.targets.iter().flatten().count()
    }
}

/// Selects each non-special position with probability `rate`. A selected
/// token becomes `[MASK]` (80%), a uniform random non-special id (10%) or
/// stays as is (10%).
pub fn mask_tokens(
    batch: &TokenBatch,
    rate: f64,
    vocab_size: usize,
    rng: &mut RngHandle,
) -> Result<MlmBatch> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Invalid(format!("mask rate {rate} outside [0, 1]")));
    }
    let mut ids = batch.ids.clone();
    let mut targets = vec![None; ids.len()];
    for (pos, id) in ids.iter_mut().enumerate() {
        if *id < NUM_SPECIAL || !rng.random_bool(rate) {
            continue;
        }
        targets[pos] = Some(*id);
        let r: f64 = rng.random();
        if r < 0.8 {
            *id = MASK;
        } else if r < 0.9 && vocab_size > NUM_SPECIAL as usize {
            *id = rng.random_range(NUM_SPECIAL..vocab_size as u32);
        }
    }
    let input = TokenBatch {
        ids,
        mask: batch.mask.clone(),
        batch: batch.batch,
        len: batch.len,
    };
    debug_assert!(input
        .ids
        .iter()
        .zip(&batch.ids)
        .all(|(&new, &old)| !matches!(old, PAD | CLS | SEP) || new == old));
    Ok(MlmBatch { input, targets })
}

/// Mean cross-entropy of `logits` (`[N, V]`, one row per position) over the
/// positions that carry a target. `None` when there are no targets.
pub fn mlm_loss<F: Scalar>(
    g: &mut Graph<F>,
    logits: Var,
    targets: &[Option<u32>],
) -> Result<Option<Var>> {
    let rows: Vec<usize> = (0..targets.len())
        .filter(|&i| targets[i].is_some())
        .collect();
    if rows.is_empty() {
        warn!("MLM batch has no target positions; loss defined as 0");
        return Ok(None);
    }
    let ys: Vec<usize> = targets.iter().flatten().map(|&t| t as usize).collect();
    let picked = g.select_rows(logits, &rows)?;
    Ok(Some(g.cross_entropy(picked, &ys, None)?))
}

pub fn perplexity(mean_nll: f64) -> f64 {
    mean_nll.exp()
}

/// Encoder with the tied MLM output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmModel {
    pub encoder: Encoder,
}

impl MlmModel {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        Ok(MlmModel {
            encoder: Encoder::new(cfg, ENC)?,
        })
    }

    pub fn init<F: Scalar>(&self, rng: &mut RngHandle) -> Result<ParamStore<F>> {
        let mut store = ParamStore::new();
        self.encoder.init(&mut store, rng)?;
        store.insert(MLM_BIAS, Tensor::zeros(&[self.encoder.cfg.vocab_size]))?;
        Ok(store)
    }

    /// Vocabulary logits at the target positions only, `[N, V]`, or `None`.
    pub fn loss<F: Scalar>(&self, f: &mut Fwd<'_, F>, batch: &MlmBatch) -> Result<Option<Var>> {
        let rows: Vec<usize> = (0..batch.targets.len())
            .filter(|&i| batch.targets[i].is_some())
            .collect();
        if rows.is_empty() {
            warn!("MLM batch has no target positions; loss defined as 0");
            return Ok(None);
        }
        let h = self.encoder.forward(f, &batch.input)?;
        let picked = f.g.select_rows(h.last(), &rows)?;
        let emb = f.p(&self.encoder.name("tok_emb"))?;
        let logits = f.g.matmul_t(picked, emb)?;
        let bias = f.p(MLM_BIAS)?;
        let logits = f.g.add(logits, bias)?;
        let ys: Vec<usize> = batch
            .targets
            .iter()
            .flatten()
            .map(|&t| t as usize)
            .collect();
        Ok(Some(f.g.cross_entropy(logits, &ys, None)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DaptConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_rate: f64,
    pub eval_fraction: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub max_len: usize,
}

impl Default for DaptConfig {
    fn default() -> Self {
        DaptConfig {
            epochs: 1,
            batch_size: 16,
            mask_rate: 0.15,
            eval_fraction: 0.05,
            optimizer: AdamWConfig::default(),
            seed: 0,
            max_len: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DaptEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaptOutcome<F> {
    pub store: ParamStore<F>,
    pub log: Vec<DaptEpoch>,
}

/// Deterministic held-out split: the first `n_eval` lines of a seeded
/// shuffle are evaluation lines. At least one line is held out and, when
/// the corpus has two or more lines, at least one is kept for training.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::stream_id("dapt-holdout")));
    if n < 2 {
        return (order.clone(), order);
    }
    let n_eval = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let eval = order[..n_eval].to_vec();
    let train = order[n_eval..].to_vec();
    (train, eval)
}

fn batches(n: usize, size: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n)
        .step_by(size.max(1))
        .map(move |s| s..(s + size).min(n))
}

/// Mean loss over target positions of the held-out lines under a fixed
/// masking seed, so every epoch scores the same corruptions.
pub fn mlm_eval<F: Scalar>(
    model: &MlmModel,
    store: &ParamStore<F>,
    data: &TokenBatch,
    cfg: &DaptConfig,
) -> Result<f64> {
    let mut mask_rng = rng::stream(cfg.seed, rng::stream_id("dapt-eval-mask"));
    let mut drop_rng = rng::stream(cfg.seed, 0);
    let vocab_size = model.encoder.cfg.vocab_size;
    let mut total = 0.0;
    let mut count = 0usize;
    for r in batches(data.batch, cfg.batch_size) {
        let idx: Vec<usize> = r.collect();
        let batch = data.select(&idx).trimmed();
        let m = mask_tokens(&batch, cfg.mask_rate, vocab_size, &mut mask_rng)?;
        let n = m.num_targets();
        let mut g = Graph::new();
        let mut f = Fwd::new(&mut g, store, &mut drop_rng);
        if let Some(loss) = model.loss(&mut f, &m)? {
            total += g.value(loss).item().as_f64() * n as f64;
            count += n;
        }
    }
    Ok(if count == 0 {
        0.0
    } else {
        total / count as f64
    })
}

/// Trains the MLM objective on `corpus` starting from `store`.
pub fn dapt_run<F: Scalar>(
    corpus: &[String],
    vocab: &Vocabulary,
    model: &MlmModel,
    store: ParamStore<F>,
    cfg: &DaptConfig,
    mut on_epoch: impl FnMut(&DaptEpoch),
) -> Result<DaptOutcome<F>> {
    if corpus.is_empty() {
        return Err(Error::Invalid("pretraining corpus is empty".into()));
    }
    if vocab.len() != model.encoder.cfg.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} entries but the encoder expects {}",
            vocab.len(),
            model.encoder.cfg.vocab_size
        )));
    }
    let max_len = cfg.max_len.min(model.encoder.cfg.max_len);
    let all = vocab.encode_batch(corpus, max_len)?;
    let (train_idx, eval_idx) = holdout_split(corpus.len(), cfg.eval_fraction, cfg.seed);
    let train = all.select(&train_idx);
    let eval = all.select(&eval_idx);

    let mut store = store;
    let mut opt = AdamW::new(cfg.optimizer);
    let mut log = Vec::with_capacity(cfg.epochs);
    let vocab_size = model.encoder.cfg.vocab_size;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.batch).collect();
        let e = epoch as u64;
        order.shuffle(&mut rng::stream(
            cfg.seed,
            rng::stream_id("dapt-order").wrapping_add(e),
        ));
        let mut mask_rng = rng::stream(cfg.seed, rng::stream_id("dapt-mask").wrapping_add(e));
        let mut drop_rng = rng::stream(cfg.seed, rng::stream_id("dapt-dropout").wrapping_add(e));
        let mut total = 0.0;
        let mut count = 0usize;
        for (bi, r) in batches(order.len(), cfg.batch_size).enumerate() {
            let batch = train.select(&order[r]).trimmed();
            let m = mask_tokens(&batch, cfg.mask_rate, vocab_size, &mut mask_rng)?;
            let n = m.num_targets();
            let mut g = Graph::training();
            let loss = {
                let mut f = Fwd::new(&mut g, &store, &mut drop_rng);
                model.loss(&mut f, &m)
            }
            .map_err(|e| diverged(epoch, bi, e))?;
            let Some(loss) = loss else { continue };
            let value = g.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::Diverged(format!(
                    "MLM loss {value} at epoch {epoch}, batch {bi}"
                )));
            }
            store.zero_grad();
            g.backward_into(loss, &mut store)?;
            opt.step(&mut store, |_| true);
            total += value * n as f64;
            count += n;
        }
        let train_loss = if count == 0 {
            0.0
        } else {
            total / count as f64
        };
        let eval_loss = mlm_eval(model, &store, &eval, cfg)?;
        let rec = DaptEpoch {
            epoch,
            train_loss,
            eval_loss,
            perplexity: perplexity(eval_loss),
        };
        on_epoch(&rec);
        log.push(rec);
    }
    Ok(DaptOutcome { store, log })
}

fn diverged(epoch: usize, batch: usize, e: Error) -> Error {
    match e {
        Error::Num(edos_numcore::NumError::NaN(op)) => {
            Error::Diverged(format!("NaN in {op} at epoch {epoch}, batch {batch}"))
        }
        other => other,
    }
}
