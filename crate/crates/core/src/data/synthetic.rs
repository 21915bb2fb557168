//! Synthetic labeled datasets and unlabeled corpora with the reference class
//! distribution.
//!
//! Every class owns a marker token (`xa1`, `xb2`, `xc7`, ...). Each marker of
//! an example is inserted with probability `pattern_strength`, so 1.0 makes
//! every level perfectly learnable and 0.0 leaves labels independent of text.
//! Markers can come in spelling variants (`xa1`, `xa1v1`, `xa1v2`, ...); the
//! unlabeled corpus always pairs two variants of the same marker in one line,
//! which is what lets masked-LM pretraining relate variants never seen with a
//! label.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::example::LabeledExample;
use super::labels::{Task, VECTOR_CATEGORY};
use super::split::{split_dataset, DatasetSplit};
use crate::error::{invalid, Result};
use edos_numcore::rng::{self, RngHandle};

/// Training-set counts of the reference dataset.
pub const TABLE_A_COUNTS: [u32; 2] = [10602, 3398];
pub const TABLE_B_COUNTS: [u32; 4] = [310, 1590, 1165, 333];
pub const TABLE_C_COUNTS: [u32; 11] = [56, 254, 717, 673, 200, 637, 417, 64, 47, 75, 258];

const FILLER: [&str; 64] = [
    "woman", "man", "people", "thread", "post", "comment", "reddit", "gab", "opinion", "think",
    "really", "always", "never", "maybe", "today", "work", "home", "friend", "money", "time",
    "life", "world", "news", "story", "video", "picture", "game", "team", "city", "school", "car",
    "phone", "food", "music", "movie", "book", "idea", "point", "reason", "question", "answer",
    "thing", "place", "night", "morning", "week", "year", "good", "bad", "big", "small", "new",
    "old", "right", "wrong", "funny", "weird", "true", "fake", "real", "here", "said", "looks",
    "feel",
];

fn normalised(counts: &[u32]) -> Vec<f64> {
    let total: f64 = counts.iter().map(|&c| c as f64).sum();
    counts.iter().map(|&c| c as f64 / total).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub total_count: usize,
    /// `[not sexist, sexist]`.
    pub proportions_a: Vec<f64>,
    /// Category shares among sexist texts.
    pub proportions_b: Vec<f64>,
    /// Vector shares among sexist texts; must aggregate to `proportions_b`.
    pub proportions_c: Vec<f64>,
    pub pattern_strength: f64,
    pub vocab_seed_words: Vec<String>,
    pub rng_seed: u64,
    /// Level whose class count bounds `total_count` from below.
    pub task_level: Task,
    /// Half-open range of marker variant indices to draw from.
    pub marker_variants: (usize, usize),
    /// Inclusive range of filler words per text.
    pub filler_words: (usize, usize),
    pub id_prefix: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            total_count: 1000,
            proportions_a: normalised(&TABLE_A_COUNTS),
            proportions_b: normalised(&TABLE_B_COUNTS),
            proportions_c: normalised(&TABLE_C_COUNTS),
            pattern_strength: 1.0,
            vocab_seed_words: FILLER.iter().map(|s| s.to_string()).collect(),
            rng_seed: 0,
            task_level: Task::C,
            marker_variants: (0, 1),
            filler_words: (4, 12),
            id_prefix: "s".into(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, p: &[f64], k: usize| -> Result<()> {
            if p.len() != k {
                return invalid(format!("{name} needs {k} proportions, got {}", p.len()));
            }
            if p.iter().any(|&x| !(x >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return invalid(format!("{name} must be nonnegative and sum to 1"));
            }
            Ok(())
        };
        check("proportions_a", &self.proportions_a, 2)?;
        check("proportions_b", &self.proportions_b, 4)?;
        check("proportions_c", &self.proportions_c, 11)?;
        for (b, &pb) in self.proportions_b.iter().enumerate() {
            let agg: f64 = (0..11)
                .filter(|&c| VECTOR_CATEGORY[c] == b)
                .map(|c| self.proportions_c[c])
                .sum();
            if (agg - pb).abs() > 1e-6 {
                return invalid(format!(
                    "vector proportions of category {b} sum to {agg}, expected {pb}"
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.pattern_strength) {
            return invalid("pattern_strength must lie in [0, 1]");
        }
        if self.total_count < self.task_level.num_classes() {
            return invalid(format!(
                "total_count {} is smaller than the {} classes of Task {}",
                self.total_count,
                self.task_level.num_classes(),
                self.task_level
            ));
        }
        let (lo, hi) = self.marker_variants;
        if lo >= hi {
            return invalid("marker_variants must be a non-empty range");
        }
        let (fmin, fmax) = self.filler_words;
        if fmin > fmax || fmax + 3 >= 64 {
            return invalid("filler_words must be a range below 61");
        }
        if self.vocab_seed_words.is_empty() {
            return invalid("vocab_seed_words is empty");
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `total` by `shares`; ties go to the lower index.
pub fn apportion(total: usize, shares: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = shares.iter().map(|&p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&x| (x + 1e-9).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Class counts for each level: `(a[2], b[4], c[11])`. Categories are
/// apportioned over the sexist count, then vectors inside each category, so
/// every level stays within one example of its exact share.
pub fn class_counts(spec: &SyntheticSpec) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let a = apportion(spec.total_count, &spec.proportions_a);
    let n_sexist = a[1];
    let b = apportion(n_sexist, &spec.proportions_b);
    let mut c = vec![0usize; 11];
    for (cat, &nb) in b.iter().enumerate() {
        let members: Vec<usize> = (0..11).filter(|&v| VECTOR_CATEGORY[v] == cat).collect();
        let exact: Vec<f64> = members
            .iter()
            .map(|&v| spec.proportions_c[v] * n_sexist as f64)
            .collect();
        let mut part: Vec<usize> = exact.iter().map(|&x| (x + 1e-9).floor() as usize).collect();
        let mut order: Vec<usize> = (0..members.len()).collect();
        order.sort_by(|&i, &j| {
            let ri = exact[i] - part[i] as f64;
            let rj = exact[j] - part[j] as f64;
            rj.total_cmp(&ri).then(i.cmp(&j))
        });
        // The category count lies between the sums of floors and ceilings,
        // so each vector gains at most one.
        let left = nb.saturating_sub(part.iter().sum());
        for &i in order.iter().take(left) {
            part[i] += 1;
        }
        for (k, &v) in members.iter().enumerate() {
            c[v] = part[k];
        }
    }
    (a, b, c)
}

pub fn marker(level: Task, class: usize, variant: usize) -> String {
    let tag = match level {
        Task::A => "xa",
        Task::B => "xb",
        Task::C => "xc",
    };
    if variant == 0 {
        format!("{tag}{class}")
    } else {
        format!("{tag}{class}v{variant}")
    }
}

fn filler(spec: &SyntheticSpec, rng: &mut RngHandle) -> Vec<String> {
    let (lo, hi) = spec.filler_words;
    let n = rng.random_range(lo..=hi).max(1);
    (0..n)
        .map(|_| {
            spec.vocab_seed_words
                .choose(rng)
                .expect("validated")
                .clone()
        })
        .collect()
}

fn insert_random(words: &mut Vec<String>, token: String, rng: &mut RngHandle) {
    let pos = rng.random_range(0..=words.len());
    words.insert(pos, token);
}

fn labels_of(sexist: bool, vector: Option<usize>) -> Vec<(Task, usize)> {
    let mut out = vec![(Task::A, usize::from(sexist))];
    if let Some(v) = vector {
        out.push((Task::B, VECTOR_CATEGORY[v]));
        out.push((Task::C, v));
    }
    out
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<LabeledExample>> {
    spec.validate()?;
    let (a, _, c) = class_counts(spec);
    let mut labels: Vec<Option<usize>> = Vec::with_capacity(spec.total_count);
    labels.extend(std::iter::repeat_n(None, a[0]));
    for (v, &n) in c.iter().enumerate() {
        labels.extend(std::iter::repeat_n(Some(v), n));
    }
    let mut rng = rng::stream(spec.rng_seed, rng::stream_id("synthetic"));
    labels.shuffle(&mut rng);

    let (vlo, vhi) = spec.marker_variants;
    labels
        .into_iter()
        .enumerate()
        .map(|(i, vector)| {
            let sexist = vector.is_some();
            let mut words = filler(spec, &mut rng);
            for (level, class) in labels_of(sexist, vector) {
                if rng.random_bool(spec.pattern_strength) {
                    let variant = rng.random_range(vlo..vhi);
                    insert_random(&mut words, marker(level, class, variant), &mut rng);
                }
            }
            LabeledExample::new(
                format!("{}{i:06}", spec.id_prefix),
                words.join(" "),
                sexist,
                vector.map(|v| VECTOR_CATEGORY[v]),
                vector,
            )
        })
        .collect()
}

/// Train/dev/test split under `spec.rng_seed` where train texts spell every
/// marker as variant 0 and dev/test texts use variants `1..variants`. With
/// one variant this is a plain split of [`generate_synthetic`].
pub fn shifted_split(
    spec: &SyntheticSpec,
    variants: usize,
    ratios: (f64, f64, f64),
) -> Result<DatasetSplit> {
    if variants == 0 {
        return invalid("variants must be at least 1");
    }
    let base = SyntheticSpec {
        marker_variants: (0, 1),
        ..spec.clone()
    };
    let mut split = split_dataset(&generate_synthetic(&base)?, ratios, spec.rng_seed)?;
    if variants > 1 {
        // Labels are drawn before any text, so both runs share them row for row.
        let shifted = SyntheticSpec {
            marker_variants: (1, variants),
            ..spec.clone()
        };
        let other = split_dataset(&generate_synthetic(&shifted)?, ratios, spec.rng_seed)?;
        split.dev = other.dev;
        split.test = other.test;
    }
    Ok(split)
}

/// Unlabeled in-domain lines. Labels are sampled from the spec's proportions
/// and each marker is written as two distinct variants from the full range.
pub fn generate_unlabeled(spec: &SyntheticSpec, lines: usize) -> Result<Vec<String>> {
    let mut s = spec.clone();
    s.total_count = s.total_count.max(s.task_level.num_classes());
    s.validate()?;
    let mut rng = rng::stream(spec.rng_seed, rng::stream_id("unlabeled"));
    let (vlo, vhi) = spec.marker_variants;
    let variants: Vec<usize> = (vlo..vhi).collect();
    let mut out = Vec::with_capacity(lines);
    for _ in 0..lines {
        let sexist = rng.random_bool(spec.proportions_a[1].clamp(0.0, 1.0));
        let vector = sexist.then(|| {
            let idx: Vec<usize> = (0..11).collect();
            *idx.choose_weighted(&mut rng, |&v| spec.proportions_c[v])
                .expect("validated proportions")
        });
        let mut words = filler(spec, &mut rng);
        for (level, class) in labels_of(sexist, vector) {
            if rng.random_bool(spec.pattern_strength) {
                for &v in variants.choose_multiple(&mut rng, 2.min(variants.len())) {
                    insert_random(&mut words, marker(level, class, v), &mut rng);
                }
            }
        }
        out.push(words.join(" "));
    }
    Ok(out)
}
