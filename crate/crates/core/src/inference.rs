//! Prediction, the joint Task B decision rule and hierarchical gating.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{LabeledExample, Task};
use crate::error::{Error, Result};
use crate::finetune::{TrainTask, JOINT_NOT_SEXIST};
use crate::heads::ModelBundle;
use crate::nn::Fwd;
use crate::tokenizer::Vocabulary;
use edos_numcore::kernels::par_map;
use edos_numcore::{rng, softmax_slice, Graph, ParamStore, Scalar};

pub const PREDICT_BATCH: usize = 64;

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Joint Task B rule: the top class unless it is "not sexist", in which case
/// the runner-up. Equivalent to the argmax over the four category entries.
pub fn joint_b_predict(probs5: &[f64]) -> usize {
    let top = argmax(probs5);
    if top != JOINT_NOT_SEXIST {
        return top;
    }
    argmax(&probs5[..JOINT_NOT_SEXIST])
}

/// Softmax probabilities for every text, evaluated in fixed batches of
/// [`PREDICT_BATCH`]; batches run in parallel when enabled.
pub fn predict_probs<F: Scalar, S: AsRef<str> + Sync>(
    bundle: &ModelBundle,
    store: &ParamStore<F>,
    vocab: &Vocabulary,
    texts: &[S],
    max_len: usize,
) -> Result<Vec<Vec<f64>>> {
    let starts: Vec<usize> = (0..texts.len()).step_by(PREDICT_BATCH).collect();
    let chunks: Vec<Result<Vec<Vec<f64>>>> = par_map(&starts, |&s| {
        let end = (s + PREDICT_BATCH).min(texts.len());
        let batch = vocab.encode_batch(&texts[s..end], max_len)?.trimmed();
        let mut g = Graph::new();
        // Evaluation graphs never draw from the generator.
        let mut unused = rng::stream(0, 0);
        let logits = {
            let mut f = Fwd::new(&mut g, store, &mut unused);
            bundle.logits(&mut f, &batch)?
        };
        let t = g.value(logits);
        let k = t.last_dim();
        Ok(t.to_f64_vec().chunks(k).map(softmax_slice).collect())
    });
    let mut out = Vec::with_capacity(texts.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub task: TrainTask,
    pub probs: Vec<f64>,
    /// Class index in the task's evaluation label set.
    pub label: usize,
}

impl Prediction {
    pub fn label_name(&self) -> &'static str {
        self.task.eval_task().labels()[self.label]
    }
}

/// A trained classifier with everything needed to run it.
#[derive(Debug, Clone)]
pub struct Classifier<F> {
    pub bundle: ModelBundle,
    pub store: ParamStore<F>,
    pub vocab: Vocabulary,
    pub task: TrainTask,
    pub max_len: usize,
}

impl<F: Scalar> Classifier<F> {
    pub fn predict(&self, examples: &[LabeledExample]) -> Result<Vec<Prediction>> {
        let texts: Vec<&str> = examples.iter().map(|e| e.text.as_str()).collect();
        let probs = predict_probs(&self.bundle, &self.store, &self.vocab, &texts, self.max_len)?;
        Ok(examples
            .iter()
            .zip(probs)
            .map(|(e, p)| Prediction {
                id: e.id.clone(),
                task: self.task,
                label: self.task.decide(&p),
                probs: p,
            })
            .collect())
    }
}

/// Writes `id,task,label[,p0..pK-1]`.
pub fn write_predictions<W: Write>(w: W, preds: &[Prediction], with_probs: bool) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let k = preds.first().map_or(0, |p| p.probs.len());
    let mut header = vec!["id".to_string(), "task".into(), "label".into()];
    if with_probs {
        header.extend((0..k).map(|i| format!("p{i}")));
    }
    out.write_record(&header)?;
    for p in preds {
        let mut row = vec![p.id.clone(), p.task.to_string(), p.label_name().to_string()];
        if with_probs {
            row.extend(p.probs.iter().map(|x| x.to_string()));
        }
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchicalPrediction {
    pub id: String,
    pub sexist: bool,
    pub category: Option<usize>,
    pub vector: Option<usize>,
}

/// Task A for every example; B and C only where A predicts sexist.
pub fn hierarchical_predict<F: Scalar>(
    a: &Classifier<F>,
    b: &Classifier<F>,
    c: &Classifier<F>,
    examples: &[LabeledExample],
) -> Result<Vec<HierarchicalPrediction>> {
    for (m, want) in [(a, Task::A), (b, Task::B), (c, Task::C)] {
        if m.task.eval_task() != want {
            return Err(Error::Invalid(format!(
                "expected a Task {want} model, got Task {}",
                m.task
            )));
        }
    }
    let pa = a.predict(examples)?;
    let flagged: Vec<LabeledExample> = examples
        .iter()
        .zip(&pa)
        .filter(|(_, p)| p.label == 1)
        .map(|(e, _)| e.clone())
        .collect();
    let pb = b.predict(&flagged)?;
    let pc = c.predict(&flagged)?;
    let mut fine = pb.into_iter().zip(pc);
    Ok(examples
        .iter()
        .zip(&pa)
        .map(|(e, p)| {
            let sexist = p.label == 1;
            let (category, vector) = if sexist {
                let (b, c) = fine.next().expect("one B/C prediction per flagged example");
                (Some(b.label), Some(c.label))
            } else {
                (None, None)
            };
            HierarchicalPrediction {
                id: e.id.clone(),
                sexist,
                category,
                vector,
            }
        })
        .collect())
}
