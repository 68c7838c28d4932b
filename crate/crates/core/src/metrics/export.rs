//! Evaluation artifacts: `report.json`, `report.txt`, `confusion.csv`,
//! `roc_class_<i>.csv` and `roc_micro.csv`.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::{
    classification_report, multiclass_roc, topk_accuracy, ClassReport, ConfusionMatrix, MetricsError, MulticlassRoc,
    RocCurve,
};
use crate::model::argmax_rows;
use crate::tensor::Tensor;

/// Everything reported for one evaluated split, at full precision.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: String,
    pub num_samples: usize,
    pub class_names: Vec<String>,
    pub top1_accuracy: f64,
    pub top2_accuracy: f64,
    pub confusion: Vec<Vec<u64>>,
    pub report: ClassReport,
    /// `None` for classes absent from the split.
    pub auc_per_class: Vec<Option<f64>>,
    pub auc_micro: f64,
}

impl EvalReport {
    /// Metrics from softmax probabilities `[N, K]` and true labels.
    pub fn compute(
        split: &str,
        probs: &Tensor<f32>,
        labels: &[usize],
        class_names: &[String],
    ) -> Result<(EvalReport, MulticlassRoc), MetricsError> {
        let k = class_names.len();
        let top1_accuracy = topk_accuracy(probs, labels, 1)?;
        let top2_accuracy = topk_accuracy(probs, labels, 2.min(k))?;
        let cm = ConfusionMatrix::new(labels, &argmax_rows(probs), k)?;
        let report = classification_report(&cm)?;
        let roc = multiclass_roc(probs, labels)?;
        let out = EvalReport {
            split: split.to_string(),
            num_samples: labels.len(),
            class_names: class_names.to_vec(),
            top1_accuracy,
            top2_accuracy,
            confusion: cm.rows().map(<[u64]>::to_vec).collect(),
            report,
            auc_per_class: roc.per_class.iter().map(|c| c.as_ref().map(|c| c.auc)).collect(),
            auc_micro: roc.micro.auc,
        };
        Ok((out, roc))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Table-style text: one row per class, then accuracy, macro and
    /// weighted averages, rounded to two decimals.
    pub fn to_text(&self) -> String {
        let labels: Vec<String> =
            self.class_names.iter().enumerate().map(|(i, n)| format!("{i} {n}")).collect();
        let width = labels.iter().map(String::len).chain([12]).max().unwrap_or(12);
        let mut out = format!("{:>width$} {:>10} {:>10} {:>10} {:>10}\n\n", "", "precision", "recall", "f1-score", "support");
        for (label, m) in labels.iter().zip(&self.report.classes) {
            writeln!(out, "{label:>width$} {:>10.2} {:>10.2} {:>10.2} {:>10}", m.precision, m.recall, m.f1, m.support)
                .expect("write to string");
        }
        out.push('\n');
        let total = self.report.macro_avg.support;
        writeln!(out, "{:>width$} {:>10} {:>10} {:>10.2} {:>10}", "accuracy", "", "", self.report.accuracy, total)
            .expect("write to string");
        for (name, a) in [("macro avg", &self.report.macro_avg), ("weighted avg", &self.report.weighted_avg)] {
            writeln!(out, "{name:>width$} {:>10.2} {:>10.2} {:>10.2} {:>10}", a.precision, a.recall, a.f1, a.support)
                .expect("write to string");
        }
        writeln!(out, "\ntop-1 accuracy {:.4}  top-2 accuracy {:.4}  micro-average AUC {:.4}", self.top1_accuracy, self.top2_accuracy, self.auc_micro)
            .expect("write to string");
        out
    }

    pub fn confusion_csv(&self) -> String {
        self.confusion
            .iter()
            .map(|row| row.iter().map(u64::to_string).collect::<Vec<_>>().join(",") + "\n")
            .collect()
    }
}

pub fn roc_csv(curve: &RocCurve) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for ((t, f), p) in curve.thresholds.iter().zip(&curve.fpr).zip(&curve.tpr) {
        writeln!(out, "{t},{f},{p}").expect("write to string");
    }
    out
}

fn write(dir: &Path, name: &str, text: &str) -> Result<(), MetricsError> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|source| MetricsError::Io { path: path.display().to_string(), source })
}

/// Write all evaluation artifacts into `dir` (created if needed). Classes
/// without a defined ROC curve get no `roc_class_<i>.csv`.
pub fn write_report_dir(dir: impl AsRef<Path>, report: &EvalReport, roc: &MulticlassRoc) -> Result<(), MetricsError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|source| MetricsError::Io { path: dir.display().to_string(), source })?;
    write(dir, "report.json", &report.to_json())?;
    write(dir, "report.txt", &report.to_text())?;
    write(dir, "confusion.csv", &report.confusion_csv())?;
    for (i, curve) in roc.per_class.iter().enumerate() {
        if let Some(curve) = curve {
            write(dir, &format!("roc_class_{i}.csv"), &roc_csv(curve))?;
        }
    }
    write(dir, "roc_micro.csv", &roc_csv(&roc.micro))
}
