//! Confusion matrices, macro F1, per-class scores and error-rate reports.
//!
//! Degenerate ratios (0/0) count as 0.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// `cm[actual][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

fn ratio(n: f64, d: f64) -> f64 {
    if d == 0.0 {
        0.0
    } else {
        n / d
    }
}

fn f1(p: f64, r: f64) -> f64 {
    ratio(2.0 * p * r, p + r)
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_rows(rows: Vec<Vec<u64>>) -> Result<Self> {
        let k = rows.len();
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return invalid(format!("confusion matrix must be square, got {k} rows"));
        }
        Ok(ConfusionMatrix { counts: rows })
    }

    /// Square, nonnegative integer CSV without a header.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|c| {
                    c.parse::<u64>().map_err(|_| {
                        Error::Format(format!("`{c}` is not a nonnegative integer count"))
                    })
                })
                .collect::<Result<Vec<u64>>>()?;
            rows.push(row);
        }
        Self::from_rows(rows)
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, actual: usize, predicted: usize) -> u64 {
        self.counts[actual][predicted]
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn precision(&self, c: usize) -> f64 {
        ratio(self.get(c, c) as f64, self.col_sum(c) as f64)
    }

    pub fn recall(&self, c: usize) -> f64 {
        ratio(self.get(c, c) as f64, self.row_sum(c) as f64)
    }

    pub fn f1(&self, c: usize) -> f64 {
        f1(self.precision(c), self.recall(c))
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        let k = self.k();
        let mut out = Self::zeros(k);
        for i in 0..k {
            for j in 0..k {
                out.counts[perm[i]][perm[j]] = self.counts[i][j];
            }
        }
        out
    }
}

pub fn confusion(golds: &[usize], preds: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if golds.len() != preds.len() {
        return invalid(format!(
            "{} gold labels but {} predictions",
            golds.len(),
            preds.len()
        ));
    }
    let mut cm = ConfusionMatrix::zeros(k);
    for (&g, &p) in golds.iter().zip(preds) {
        if g >= k || p >= k {
            return invalid(format!("label pair ({g}, {p}) outside {k} classes"));
        }
        cm.counts[g][p] += 1;
    }
    Ok(cm)
}

/// Unweighted mean of per-class F1. With `skip_empty`, classes that never
/// occur in gold labels or predictions are left out of the mean.
pub fn macro_f1_with(cm: &ConfusionMatrix, skip_empty: bool) -> f64 {
    let classes: Vec<usize> = (0..cm.k())
        .filter(|&c| !skip_empty || cm.row_sum(c) + cm.col_sum(c) > 0)
        .collect();
    ratio(
        classes.iter().map(|&c| cm.f1(c)).sum(),
        classes.len() as f64,
    )
}

pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    macro_f1_with(cm, false)
}

/// Macro F1 straight from label lists, counting true positives, predicted
/// and actual totals per class without building a matrix.
pub fn macro_f1_from_labels(golds: &[usize], preds: &[usize], k: usize) -> Result<f64> {
    if golds.len() != preds.len() {
        return invalid("label lists differ in length");
    }
    let mut tp = vec![0u64; k];
    let mut pred_n = vec![0u64; k];
    let mut gold_n = vec![0u64; k];
    for (&g, &p) in golds.iter().zip(preds) {
        if g >= k || p >= k {
            return invalid(format!("label pair ({g}, {p}) outside {k} classes"));
        }
        gold_n[g] += 1;
        pred_n[p] += 1;
        if g == p {
            tp[g] += 1;
        }
    }
    let total: f64 = (0..k)
        .map(|c| {
            f1(
                ratio(tp[c] as f64, pred_n[c] as f64),
                ratio(tp[c] as f64, gold_n[c] as f64),
            )
        })
        .sum();
    Ok(total / k as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

pub fn per_class_report(cm: &ConfusionMatrix) -> Vec<ClassScore> {
    (0..cm.k())
        .map(|c| ClassScore {
            class: c,
            precision: cm.precision(c),
            recall: cm.recall(c),
            f1: cm.f1(c),
            support: cm.row_sum(c),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRate {
    pub actual: usize,
    pub predicted: usize,
    pub count: u64,
    pub row_total: u64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorReport {
    /// Off-diagonal rates, highest first; ties in (actual, predicted) order.
    pub rates: Vec<ErrorRate>,
    /// Classes left out because they have no gold examples.
    pub omitted: Vec<usize>,
}

pub fn error_report(cm: &ConfusionMatrix) -> ErrorReport {
    let mut rep = ErrorReport::default();
    for g in 0..cm.k() {
        let total = cm.row_sum(g);
        if total == 0 {
            rep.omitted.push(g);
            continue;
        }
        for p in (0..cm.k()).filter(|&p| p != g) {
            rep.rates.push(ErrorRate {
                actual: g,
                predicted: p,
                count: cm.get(g, p),
                row_total: total,
                rate: cm.get(g, p) as f64 / total as f64,
            });
        }
    }
    rep.rates.sort_by(|a, b| {
        b.rate
            .total_cmp(&a.rate)
            .then((a.actual, a.predicted).cmp(&(b.actual, b.predicted)))
    });
    rep
}

/// Everything the evaluation commands print.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub labels: Vec<String>,
    pub confusion: ConfusionMatrix,
    pub macro_f1: f64,
    pub per_class: Vec<ClassScore>,
    pub errors: ErrorReport,
}

impl EvalReport {
    pub fn new(cm: ConfusionMatrix, labels: Vec<String>) -> Self {
        EvalReport {
            macro_f1: macro_f1(&cm),
            per_class: per_class_report(&cm),
            errors: error_report(&cm),
            confusion: cm,
            labels,
        }
    }

    fn label(&self, i: usize) -> String {
        self.labels
            .get(i)
            .cloned()
            .unwrap_or_else(|| format!("class {i}"))
    }

    /// Plain-text rendering.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "macro F1: {:.4}", self.macro_f1);
        let _ = writeln!(s, "\nconfusion matrix (rows actual, columns predicted):");
        for (i, row) in self.confusion.rows().iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|c| format!("{c:>6}")).collect();
            let _ = writeln!(s, "{} | {}", cells.join(" "), self.label(i));
        }
        let _ = writeln!(
            s,
            "\n{:<58} {:>9} {:>9} {:>9} {:>8}",
            "class", "precision", "recall", "f1", "support"
        );
        for c in &self.per_class {
            let _ = writeln!(
                s,
                "{:<58} {:>9.4} {:>9.4} {:>9.4} {:>8}",
                self.label(c.class),
                c.precision,
                c.recall,
                c.f1,
                c.support
            );
        }
        let _ = writeln!(s, "\nmisclassification rates (actual -> predicted):");
        for e in self.errors.rates.iter().filter(|e| e.count > 0) {
            let _ = writeln!(
                s,
                "{:.4}  {}/{}  {} -> {}",
                e.rate,
                e.count,
                e.row_total,
                self.label(e.actual),
                self.label(e.predicted)
            );
        }
        for &o in &self.errors.omitted {
            let _ = writeln!(
                s,
                "note: {} has no gold examples; row omitted",
                self.label(o)
            );
        }
        s
    }

    /// Machine-readable rows `section,actual,predicted,value`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["section", "actual", "predicted", "value"])?;
        w.write_record(["macro_f1", "", "", &format!("{}", self.macro_f1)])?;
        for (i, row) in self.confusion.rows().iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                w.write_record(["confusion", &self.label(i), &self.label(j), &c.to_string()])?;
            }
        }
        for c in &self.per_class {
            let l = self.label(c.class);
            w.write_record(["precision", &l, "", &c.precision.to_string()])?;
            w.write_record(["recall", &l, "", &c.recall.to_string()])?;
            w.write_record(["f1", &l, "", &c.f1.to_string()])?;
            w.write_record(["support", &l, "", &c.support.to_string()])?;
        }
        for e in &self.errors.rates {
            w.write_record([
                "error_rate",
                &self.label(e.actual),
                &self.label(e.predicted),
                &e.rate.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}
