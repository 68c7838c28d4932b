//! Classification metrics: confusion matrix, per-class report, top-k
//! accuracy and one-vs-rest / micro-average ROC.

pub mod export;

use serde::Serialize;
use thiserror::Error;

use crate::tensor::Tensor;

pub use export::{write_report_dir, EvalReport};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("label {label} at index {index} is not below {classes}")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },
    #[error("{what}: expected {expected} entries, found {found}")]
    LengthMismatch { what: &'static str, expected: usize, found: usize },
    #[error("no samples to evaluate")]
    Empty,
    #[error("k = {k} outside 1..={classes}")]
    InvalidK { k: usize, classes: usize },
    #[error("ROC needs both classes: {positives} positives among {total} samples")]
    SingleClass { positives: usize, total: usize },
    #[error("non-finite score at index {index}")]
    NonFiniteScore { index: usize },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Counts with rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

fn check_labels(labels: &[usize], classes: usize) -> Result<(), MetricsError> {
    match labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        Some((index, &label)) => Err(MetricsError::LabelOutOfRange { index, label, classes }),
        None => Ok(()),
    }
}

impl ConfusionMatrix {
    pub fn new(truth: &[usize], pred: &[usize], classes: usize) -> Result<Self, MetricsError> {
        if truth.len() != pred.len() {
            return Err(MetricsError::LengthMismatch { what: "predictions", expected: truth.len(), found: pred.len() });
        }
        check_labels(truth, classes)?;
        check_labels(pred, classes)?;
        let mut counts = vec![0u64; classes * classes];
        for (&t, &p) in truth.iter().zip(pred) {
            counts[t * classes + p] += 1;
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self, MetricsError> {
        if counts.len() != classes * classes {
            return Err(MetricsError::LengthMismatch { what: "counts", expected: classes * classes, found: counts.len() });
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u64]> {
        self.counts.chunks(self.classes.max(1))
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// Samples whose true class is `c`.
    pub fn support(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    /// Samples predicted as `c`.
    pub fn predicted(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, c)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Some ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Average {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub classes: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub macro_avg: Average,
    pub weighted_avg: Average,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn classification_report(cm: &ConfusionMatrix) -> Result<ClassReport, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::Empty);
    }
    let classes: Vec<ClassMetrics> = (0..cm.classes())
        .map(|c| {
            let tp = cm.get(c, c);
            let (precision, dp) = ratio(tp, cm.predicted(c));
            let (recall, dr) = ratio(tp, cm.support(c));
            let sum = precision + recall;
            let f1 = if sum > 0.0 { 2.0 * precision * recall / sum } else { 0.0 };
            ClassMetrics { precision, recall, f1, support: cm.support(c), degenerate: dp || dr || sum == 0.0 }
        })
        .collect();
    let k = classes.len() as f64;
    let macro_avg = Average {
        precision: classes.iter().map(|m| m.precision).sum::<f64>() / k,
        recall: classes.iter().map(|m| m.recall).sum::<f64>() / k,
        f1: classes.iter().map(|m| m.f1).sum::<f64>() / k,
        support: total,
    };
    let w = |f: fn(&ClassMetrics) -> f64| classes.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / total as f64;
    let weighted_avg =
        Average { precision: w(|m| m.precision), recall: w(|m| m.recall), f1: w(|m| m.f1), support: total };
    Ok(ClassReport { classes, accuracy: cm.accuracy(), macro_avg, weighted_avg })
}

fn check_scores(scores: &Tensor<f32>, labels: &[usize]) -> Result<usize, MetricsError> {
    let k = scores.shape().last().copied().unwrap_or(0);
    if scores.rank() != 2 || scores.shape()[0] != labels.len() {
        return Err(MetricsError::LengthMismatch {
            what: "score rows",
            expected: labels.len(),
            found: scores.shape().first().copied().unwrap_or(0),
        });
    }
    if labels.is_empty() {
        return Err(MetricsError::Empty);
    }
    check_labels(labels, k)?;
    if let Some(index) = scores.data().iter().position(|v| !v.is_finite()) {
        return Err(MetricsError::NonFiniteScore { index });
    }
    Ok(k)
}

/// Rank of the true class: how many classes outrank it, where a tie with
/// a lower class index counts as outranking.
fn true_class_rank(row: &[f32], label: usize) -> usize {
    let s = row[label];
    row.iter().enumerate().filter(|&(j, &v)| v > s || (v == s && j < label)).count()
}

/// Fraction of rows whose true label is among the `k` highest scores.
pub fn topk_accuracy(scores: &Tensor<f32>, labels: &[usize], k: usize) -> Result<f64, MetricsError> {
    let classes = check_scores(scores, labels)?;
    if k == 0 || k > classes {
        return Err(MetricsError::InvalidK { k, classes });
    }
    let hits = scores.data().chunks(classes).zip(labels).filter(|(row, &l)| true_class_rank(row, l) < k).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// ROC points from the strictest threshold (+∞, at (0, 0)) down to the
/// lowest score (at (1, 1)). Equal scores form a single step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub auc: f64,
}

pub fn roc_curve(scores: &[f32], positive: &[bool]) -> Result<RocCurve, MetricsError> {
    if scores.len() != positive.len() {
        return Err(MetricsError::LengthMismatch { what: "positives", expected: scores.len(), found: positive.len() });
    }
    if let Some(index) = scores.iter().position(|v| !v.is_finite()) {
        return Err(MetricsError::NonFiniteScore { index });
    }
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = positive.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClass { positives: pos, total: positive.len() });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut curve = RocCurve { thresholds: vec![f64::INFINITY], fpr: vec![0.0], tpr: vec![0.0], auc: 0.0 };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.thresholds.push(s as f64);
        curve.fpr.push(fp as f64 / neg as f64);
        curve.tpr.push(tp as f64 / pos as f64);
    }
    curve.auc = trapezoid(&curve.fpr, &curve.tpr);
    Ok(curve)
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2).zip(y.windows(2)).map(|(xw, yw)| (xw[1] - xw[0]) * (yw[0] + yw[1]) / 2.0).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MulticlassRoc {
    /// One-vs-rest curve per class; `None` when the class is absent from,
    /// or is the whole of, the evaluated labels.
    pub per_class: Vec<Option<RocCurve>>,
    /// All `N × K` (score, indicator) pairs pooled into one binary problem.
    pub micro: RocCurve,
}

pub fn multiclass_roc(scores: &Tensor<f32>, labels: &[usize]) -> Result<MulticlassRoc, MetricsError> {
    let k = check_scores(scores, labels)?;
    let n = labels.len();
    let data = scores.data();
    let per_class = (0..k)
        .map(|c| {
            let col: Vec<f32> = (0..n).map(|i| data[i * k + c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            roc_curve(&col, &pos).ok()
        })
        .collect();
    let flat_pos: Vec<bool> = (0..n * k).map(|j| labels[j / k] == j % k).collect();
    let micro = roc_curve(data, &flat_pos)?;
    Ok(MulticlassRoc { per_class, micro })
}
