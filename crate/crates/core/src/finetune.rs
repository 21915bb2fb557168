//! Supervised training for Tasks A, B, C and joint Task B.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledExample, Task};
use crate::encoder::AttentionKind;
use crate::error::{Error, Result};
use crate::heads::ModelBundle;
use crate::inference::{argmax, joint_b_predict, predict_probs};
use crate::metrics::{confusion, macro_f1};
use crate::nn::Fwd;
use crate::optim::{AdamW, AdamWConfig};
use crate::tokenizer::{TokenBatch, Vocabulary};
use edos_numcore::rng;
use edos_numcore::{Graph, NumError, ParamStore, Scalar};

/// Label space a model is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrainTask {
    A,
    B,
    C,
    /// All examples; Task B categories plus "not sexist" at index 4.
    #[serde(rename = "B_joint")]
    BJoint,
}

pub const JOINT_NOT_SEXIST: usize = 4;

impl TrainTask {
    pub fn num_classes(self) -> usize {
        match self {
            TrainTask::A => 2,
            TrainTask::B => 4,
            TrainTask::C => 11,
            TrainTask::BJoint => 5,
        }
    }

    /// Task whose labels the model's predictions are reported in.
    pub fn eval_task(self) -> Task {
        match self {
            TrainTask::A => Task::A,
            TrainTask::B | TrainTask::BJoint => Task::B,
            TrainTask::C => Task::C,
        }
    }

    pub fn class_names(self) -> Vec<String> {
        let mut names: Vec<String> = self
            .eval_task()
            .labels()
            .iter()
            .map(|s| s.to_string())
            .collect();
        if self == TrainTask::BJoint {
            names.push(crate::data::labels::NOT_SEXIST.to_string());
        }
        names
    }

    /// Training target of an example, if it takes part in this task.
    pub fn label_of(self, ex: &LabeledExample) -> Option<usize> {
        match self {
            TrainTask::A => Some(ex.label_a()),
            TrainTask::B => ex.category,
            TrainTask::C => ex.vector,
            TrainTask::BJoint => Some(ex.category.unwrap_or(JOINT_NOT_SEXIST)),
        }
    }

    /// Gold label in the evaluation label space; B and C score only sexist rows.
    pub fn eval_label_of(self, ex: &LabeledExample) -> Option<usize> {
        match self {
            TrainTask::BJoint => ex.category,
            t => t.label_of(ex),
        }
    }

    /// Predicted class in the evaluation label space.
    pub fn decide(self, probs: &[f64]) -> usize {
        match self {
            TrainTask::BJoint => joint_b_predict(probs),
            _ => argmax(probs),
        }
    }
}

impl fmt::Display for TrainTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainTask::A => "A",
            TrainTask::B => "B",
            TrainTask::C => "C",
            TrainTask::BJoint => "B_joint",
        })
    }
}

impl FromStr for TrainTask {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "A" | "a" => Ok(TrainTask::A),
            "B" | "b" => Ok(TrainTask::B),
            "C" | "c" => Ok(TrainTask::C),
            "B_joint" | "b_joint" | "BJoint" => Ok(TrainTask::BJoint),
            other => Err(format!("unknown task `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Random,
    FromDaptCheckpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub task: TrainTask,
    pub init: Init,
    /// Inverse-frequency class weights in the loss.
    pub class_weights: bool,
    /// Train the head only.
    pub freeze_encoders: bool,
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            optimizer: AdamWConfig::default(),
            seed: 0,
            task: TrainTask::A,
            init: Init::Random,
            class_weights: false,
            freeze_encoders: false,
            max_len: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.max_len < 3 {
            return Err(Error::Config("max_len must be at least 3".into()));
        }
        Ok(())
    }
}

/// Examples taking part in `task` and their class indices.
pub fn select_training_set(
    examples: &[LabeledExample],
    task: TrainTask,
) -> Result<(Vec<&LabeledExample>, Vec<usize>)> {
    let (ex, ys): (Vec<_>, Vec<_>) = examples
        .iter()
        .filter_map(|e| task.label_of(e).map(|y| (e, y)))
        .unzip();
    if ex.is_empty() && matches!(task, TrainTask::B | TrainTask::C) {
        return Err(Error::Invalid(format!(
            "no sexist examples to train Task {task} on"
        )));
    }
    Ok((ex, ys))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_macro_f1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    pub fn best_dev_macro_f1(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.epochs[e].dev_macro_f1)
    }

    /// Lines `epoch,train_loss,dev_macro_f1`.
    pub fn to_lines(&self) -> String {
        let mut s = String::from("epoch,train_loss,dev_macro_f1\n");
        for r in &self.epochs {
            s.push_str(&format!(
                "{},{},{}\n",
                r.epoch, r.train_loss, r.dev_macro_f1
            ));
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path.as_ref())?;
        f.write_all(self.to_lines().as_bytes())?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    pub log: TrainLog,
    /// Parameters of the best dev epoch (the initialisation when no epoch ran).
    pub best: ParamStore<F>,
}

fn inverse_frequency(ys: &[usize], k: usize) -> Vec<f64> {
    let mut n = vec![0usize; k];
    for &y in ys {
        n[y] += 1;
    }
    let total = ys.len() as f64;
    n.iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                total / (k as f64 * c as f64)
            }
        })
        .collect()
}

/// Macro F1 of `store` on `examples` in the task's evaluation label space.
pub fn evaluate_macro_f1<F: Scalar>(
    bundle: &ModelBundle,
    store: &ParamStore<F>,
    vocab: &Vocabulary,
    examples: &[LabeledExample],
    task: TrainTask,
    max_len: usize,
) -> Result<f64> {
    let rows: Vec<&LabeledExample> = examples
        .iter()
        .filter(|e| task.eval_label_of(e).is_some())
        .collect();
    if rows.is_empty() {
        return Err(Error::Invalid(format!("no dev examples for Task {task}")));
    }
    let texts: Vec<&str> = rows.iter().map(|e| e.text.as_str()).collect();
    let probs = predict_probs(bundle, store, vocab, &texts, max_len)?;
    let golds: Vec<usize> = rows
        .iter()
        .map(|e| task.eval_label_of(e).expect("filtered"))
        .collect();
    let preds: Vec<usize> = probs.iter().map(|p| task.decide(p)).collect();
    Ok(macro_f1(&confusion(
        &golds,
        &preds,
        task.eval_task().num_classes(),
    )?))
}

/// Copies a pretrained encoder stored under `prefix` into every encoder slot
/// of `bundle` with attention `kind`. Every parameter of a filled slot must be
/// supplied with a matching shape. Returns the slots filled.
pub fn load_pretrained_encoder<F: Scalar>(
    bundle: &ModelBundle,
    store: &mut ParamStore<F>,
    kind: AttentionKind,
    pretrained: &ParamStore<F>,
    prefix: &str,
) -> Result<Vec<&'static str>> {
    let slots = bundle.slot_for(kind);
    for &slot in &slots {
        let targets: Vec<String> = store
            .names()
            .filter(|n| n.starts_with(slot))
            .map(String::from)
            .collect();
        for target in targets {
            let source = format!("{prefix}{}", &target[slot.len()..]);
            let value = pretrained.get(&source).map_err(|_| {
                Error::Config(format!(
                    "pretrained encoder has no `{source}` for `{target}`"
                ))
            })?;
            if value.shape() != store.get(&target)?.shape() {
                return Err(Error::Config(format!(
                    "pretrained `{source}` has shape {:?} but `{target}` needs {:?}",
                    value.shape(),
                    store.get(&target)?.shape()
                )));
            }
            store.set(&target, value.clone())?;
        }
    }
    Ok(slots)
}

/// Fine-tunes `init` on `train`, keeping the parameters of the epoch with
/// the best dev macro F1 (earlier epoch on ties).
#[allow(clippy::too_many_arguments)]
pub fn train<F: Scalar>(
    bundle: &ModelBundle,
    init: ParamStore<F>,
    vocab: &Vocabulary,
    train: &[LabeledExample],
    dev: &[LabeledExample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    bundle.validate()?;
    if bundle.head.num_classes != cfg.task.num_classes() {
        return Err(Error::Config(format!(
            "head has {} classes but Task {} needs {}",
            bundle.head.num_classes,
            cfg.task,
            cfg.task.num_classes()
        )));
    }
    if vocab.len() != bundle.encoder_a.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} entries but the encoder expects {}",
            vocab.len(),
            bundle.encoder_a.vocab_size
        )));
    }
    if !dev.iter().any(|e| cfg.task.eval_label_of(e).is_some()) {
        return Err(Error::Invalid(
            "dev set has no examples for this task".into(),
        ));
    }
    let (examples, ys) = select_training_set(train, cfg.task)?;
    if examples.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let texts: Vec<&str> = examples.iter().map(|e| e.text.as_str()).collect();
    let encoded: TokenBatch = vocab.encode_batch(&texts, cfg.max_len)?;
    let weights = cfg
        .class_weights
        .then(|| inverse_frequency(&ys, cfg.task.num_classes()));

    let mut store = init;
    let mut best = store.clone();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut log = TrainLog::default();
    let mut opt = AdamW::new(cfg.optimizer);
    let freeze = cfg.freeze_encoders;
    let trainable = move |name: &str| !(freeze && ModelBundle::is_encoder_param(name));

    for epoch in 0..cfg.epochs {
        let e = epoch as u64;
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng::stream(
            cfg.seed,
            rng::stream_id("train-order").wrapping_add(e),
        ));
        let mut drop_rng = rng::stream(cfg.seed, rng::stream_id("train-dropout").wrapping_add(e));
        let mut total = 0.0;
        let mut seen = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = encoded.select(chunk).trimmed();
            let targets: Vec<usize> = chunk.iter().map(|&i| ys[i]).collect();
            let mut g = Graph::training();
            let loss = {
                let mut f = Fwd::new(&mut g, &store, &mut drop_rng);
                bundle
                    .logits(&mut f, &batch)
                    .and_then(|l| Ok(f.g.cross_entropy(l, &targets, weights.as_deref())?))
            };
            let loss = loss.map_err(|err| match err {
                Error::Num(NumError::NaN(op)) => {
                    Error::Diverged(format!("NaN in {op} at epoch {epoch}, batch {bi}"))
                }
                other => other,
            })?;
            let value = g.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::Diverged(format!(
                    "loss {value} at epoch {epoch}, batch {bi}"
                )));
            }
            store.zero_grad();
            g.backward_into(loss, &mut store)?;
            opt.step(&mut store, trainable);
            total += value * chunk.len() as f64;
            seen += chunk.len();
        }
        let dev_f1 = evaluate_macro_f1(bundle, &store, vocab, dev, cfg.task, cfg.max_len)?;
        let rec = EpochRecord {
            epoch,
            train_loss: total / seen as f64,
            dev_macro_f1: dev_f1,
        };
        on_epoch(&rec);
        log.epochs.push(rec);
        if dev_f1 > best_f1 {
            best_f1 = dev_f1;
            best = store.clone();
            log.best_epoch = Some(epoch);
        }
    }
    Ok(TrainOutcome { log, best })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(id: &str, vector: Option<usize>) -> LabeledExample {
        let cat = vector.map(|v| crate::data::VECTOR_CATEGORY[v]);
        LabeledExample::new(id, "t", vector.is_some(), cat, vector).unwrap()
    }

    #[test]
    fn selection_per_task() {
        let data = vec![
            ex("a", None),
            ex("b", Some(2)),
            ex("c", Some(10)),
            ex("d", None),
        ];
        assert_eq!(
            select_training_set(&data, TrainTask::A).unwrap().1,
            [0, 1, 1, 0]
        );
        assert_eq!(select_training_set(&data, TrainTask::B).unwrap().1, [1, 3]);
        assert_eq!(select_training_set(&data, TrainTask::C).unwrap().1, [2, 10]);
        assert_eq!(
            select_training_set(&data, TrainTask::BJoint).unwrap().1,
            [4, 1, 3, 4]
        );
        let none = vec![ex("a", None)];
        assert!(select_training_set(&none, TrainTask::B).is_err());
        assert!(select_training_set(&none, TrainTask::C).is_err());
    }

    #[test]
    fn inverse_frequency_weights() {
        let w = inverse_frequency(&[0, 0, 0, 1], 3);
        assert_eq!(w, [4.0 / 9.0, 4.0 / 3.0, 0.0]);
    }

    #[test]
    fn task_parsing() {
        for t in [TrainTask::A, TrainTask::B, TrainTask::C, TrainTask::BJoint] {
            assert_eq!(t.to_string().parse::<TrainTask>().unwrap(), t);
        }
    }
}
