//! Confusion matrix, threshold metrics, ROC AUC and multi-run aggregation.
//!
//! The positive class is 1 (Pneumonia) throughout.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::arch::Classifier;
use crate::data::{collate, Sample};
use crate::error::{Error, Result};

/// A metric value, or the reason it has none (a zero denominator).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Defined(f64),
    Undefined { undefined: String },
}

impl Value {
    pub fn undefined(reason: impl Into<String>) -> Self {
        Value::Undefined {
            undefined: reason.into(),
        }
    }

    pub fn get(&self) -> Option<f64> {
        match self {
            Value::Defined(v) => Some(*v),
            Value::Undefined { .. } => None,
        }
    }

    fn ratio(num: u64, den: u64, what: &str) -> Self {
        if den == 0 {
            Value::undefined(format!("{what} is 0"))
        } else {
            Value::Defined(num as f64 / den as f64)
        }
    }

    /// Scientific notation with three decimals and a two-digit exponent,
    /// e.g. `8.869E-01`; undefined values render as `undefined`.
    pub fn render(&self) -> String {
        match self {
            Value::Defined(v) => sci(*v),
            Value::Undefined { .. } => "undefined".into(),
        }
    }
}

/// `8.869E-01` style rendering.
pub fn sci(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    let s = format!("{v:.3E}");
    let (mantissa, exp) = s.split_once('E').expect("E present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mantissa}E{sign}{:02}", exp.abs())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// 2×2 grid, rows actual and columns predicted.
    pub fn render(&self) -> String {
        let w = [self.tp, self.tn, self.fp, self.fn_]
            .iter()
            .map(|v| v.to_string().len())
            .max()
            .unwrap_or(1)
            .max("PNEUMONIA".len());
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>18} {:>w$} {:>w$}",
            "actual \\ predicted", "NORMAL", "PNEUMONIA"
        );
        let _ = writeln!(out, "{:>18} {:>w$} {:>w$}", "NORMAL", self.tn, self.fp);
        let _ = writeln!(out, "{:>18} {:>w$} {:>w$}", "PNEUMONIA", self.fn_, self.tp);
        out
    }
}

pub fn confusion(labels: &[usize], predictions: &[usize]) -> Result<ConfusionMatrix> {
    if labels.len() != predictions.len() {
        return Err(Error::invalid(
            "confusion",
            format!("{} labels but {} predictions", labels.len(), predictions.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::Empty("confusion"));
    }
    let mut cm = ConfusionMatrix::default();
    for (&y, &p) in labels.iter().zip(predictions) {
        if y > 1 || p > 1 {
            return Err(Error::invalid(
                "confusion",
                format!("labels must be 0 or 1, got ({y}, {p})"),
            ));
        }
        match (y, p) {
            (1, 1) => cm.tp += 1,
            (0, 0) => cm.tn += 1,
            (0, 1) => cm.fp += 1,
            _ => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: Value,
    pub pre: Value,
    pub rec: Value,
    pub spf: Value,
    pub tpr: Value,
    pub fpr: Value,
    pub ppv: Value,
    pub f1: Value,
    pub auc: Value,
    pub loss: Value,
}

/// Metric names in report order.
pub const METRIC_NAMES: [&str; 10] = ["acc", "pre", "rec", "spf", "tpr", "fpr", "ppv", "f1", "auc", "loss"];

impl MetricsReport {
    pub fn values(&self) -> [&Value; 10] {
        [
            &self.acc, &self.pre, &self.rec, &self.spf, &self.tpr, &self.fpr, &self.ppv, &self.f1, &self.auc,
            &self.loss,
        ]
    }

    fn values_mut(&mut self) -> [&mut Value; 10] {
        [
            &mut self.acc,
            &mut self.pre,
            &mut self.rec,
            &mut self.spf,
            &mut self.tpr,
            &mut self.fpr,
            &mut self.ppv,
            &mut self.f1,
            &mut self.auc,
            &mut self.loss,
        ]
    }

    /// One `NAME value` line per metric in scientific notation.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, v) in METRIC_NAMES.iter().zip(self.values()) {
            let _ = writeln!(out, "{:<4} {}", name.to_uppercase(), v.render());
        }
        out
    }
}

/// Threshold metrics of `cm`; `auc` and `loss` are left undefined.
pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    if cm.total() == 0 {
        return Err(Error::Empty("metrics"));
    }
    let ConfusionMatrix { tp, tn, fp, fn_ } = *cm;
    let pre = Value::ratio(tp, tp + fp, "TP+FP");
    let rec = Value::ratio(tp, tp + fn_, "TP+FN");
    Ok(MetricsReport {
        acc: Value::ratio(tp + tn, tp + tn + fp + fn_, "total"),
        pre: pre.clone(),
        rec: rec.clone(),
        spf: Value::ratio(tn, tn + fp, "TN+FP"),
        tpr: rec,
        fpr: Value::ratio(fp, fp + tn, "FP+TN"),
        ppv: pre,
        f1: Value::ratio(2 * tp, 2 * tp + fp + fn_, "2TP+FP+FN"),
        auc: Value::undefined("not computed"),
        loss: Value::undefined("not computed"),
    })
}

fn check_scores(labels: &[usize], scores: &[f64]) -> Result<(usize, usize)> {
    if labels.len() != scores.len() {
        return Err(Error::invalid(
            "roc_auc",
            format!("{} labels but {} scores", labels.len(), scores.len()),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("roc_auc", "NaN score"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Probability that a random positive outscores a random negative, ties
/// counted as one half (Mann-Whitney U over mid-ranks).
pub fn roc_auc(labels: &[usize], scores: &[f64]) -> Result<Value> {
    let (pos, neg) = check_scores(labels, scores)?;
    if pos == 0 || neg == 0 {
        return Ok(Value::undefined(format!(
            "needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok(Value::Defined((rank_sum - p * (p + 1.0) / 2.0) / (p * n)))
}

/// Area under the empirical ROC curve by the trapezoid rule over every
/// distinct threshold.
pub fn roc_auc_trapezoid(labels: &[usize], scores: &[f64]) -> Result<Value> {
    let (pos, neg) = check_scores(labels, scores)?;
    if pos == 0 || neg == 0 {
        return Ok(Value::undefined(format!(
            "needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0f64, 0.0f64);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (tpr, fpr) = (tp as f64 / pos as f64, fp as f64 / neg as f64);
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(Value::Defined(area))
}

/// Outcome of running a classifier over a labelled set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub confusion: ConfusionMatrix,
    /// Softmax probability of the positive class, per sample.
    pub scores: Vec<f64>,
    pub predictions: Vec<usize>,
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode pass over `samples` in batches of `batch_size`.
pub fn evaluate<M: Classifier + ?Sized>(model: &M, samples: &[Sample], batch_size: usize) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluate"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("evaluate", "batch size must be >= 1"));
    }
    let k = model.num_classes();
    let mut scores = Vec::with_capacity(samples.len());
    let mut predictions = Vec::with_capacity(samples.len());
    let mut loss_sum = 0.0f64;
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let (x, labels) = collate(samples, chunk)?;
        let logits = model.logits(&x)?;
        if logits.shape() != [chunk.len(), k] {
            return Err(Error::shape(
                "evaluate",
                format!("logits {:?} for a batch of {}", logits.shape(), chunk.len()),
            ));
        }
        for (row, y) in logits.data().chunks(k).zip(labels) {
            if y >= k {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    classes: k,
                    row: scores.len(),
                });
            }
            // Per-sample softmax cross-entropy in 64-bit, so the mean does
            // not depend on how samples were batched.
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
            loss_sum += lse - row[y] as f64;
            predictions.push(argmax(row));
            scores.push((row[1] as f64 - lse).exp());
        }
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let cm = confusion(&labels, &predictions)?;
    let mut report = metrics(&cm)?;
    report.auc = roc_auc(&labels, &scores)?;
    report.loss = Value::Defined(loss_sum / samples.len() as f64);
    Ok(Evaluation {
        report,
        confusion: cm,
        scores,
        predictions,
    })
}

/// Mean of several reports with the number of undefined values skipped per
/// metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub report: MetricsReport,
    pub count: usize,
    pub skipped: BTreeMap<String, usize>,
}

pub fn aggregate(reports: &[MetricsReport]) -> Result<Aggregate> {
    let first = reports.first().ok_or(Error::Empty("aggregate"))?;
    let mut out = first.clone();
    let mut skipped = BTreeMap::new();
    for (m, slot) in out.values_mut().into_iter().enumerate() {
        let defined: Vec<f64> = reports.iter().filter_map(|r| r.values()[m].get()).collect();
        let missing = reports.len() - defined.len();
        if missing > 0 {
            skipped.insert(METRIC_NAMES[m].to_string(), missing);
        }
        *slot = if defined.is_empty() {
            Value::undefined("undefined in every report")
        } else {
            Value::Defined(defined.iter().sum::<f64>() / defined.len() as f64)
        };
    }
    Ok(Aggregate {
        report: out,
        count: reports.len(),
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scientific_rendering() {
        assert_eq!(sci(0.8869), "8.869E-01");
        assert_eq!(sci(0.9515), "9.515E-01");
        assert_eq!(sci(0.3332), "3.332E-01");
        assert_eq!(sci(1.0), "1.000E+00");
        assert_eq!(sci(0.0), "0.000E+00");
        assert_eq!(sci(12.5), "1.250E+01");
    }

    #[test]
    fn argmax_ties_go_to_class_zero() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.5]), 1);
    }
}
