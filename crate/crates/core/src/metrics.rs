//! Confusion-matrix evaluation: per-class one-vs-rest precision/recall/F1,
//! macro aggregation and overall accuracy.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// Set when a 0/0 convention was applied (no predicted positives or no
    /// support) instead of the plain formula.
    pub degenerate: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    /// Rows = true class, columns = predicted class.
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    /// Classes excluded from macro means for zero support.
    pub excluded_classes: Vec<usize>,
}

/// Entry (i, j) counts examples with true class i predicted as j.
pub fn confusion_matrix(
    true_labels: &[usize],
    predicted_labels: &[usize],
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    if true_labels.len() != predicted_labels.len() {
        return Err(Error::invalid(format!(
            "label list lengths differ: {} vs {}",
            true_labels.len(),
            predicted_labels.len()
        )));
    }
    let mut m = vec![vec![0usize; k]; k];
    for (&t, &p) in true_labels.iter().zip(predicted_labels) {
        if t >= k || p >= k {
            return Err(Error::invalid(format!("label ({t}, {p}) outside 0..{k}")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Report from already-computed predictions.
pub fn report_from_labels(
    true_labels: &[usize],
    predicted_labels: &[usize],
    k: usize,
) -> Result<MetricsReport> {
    let confusion = confusion_matrix(true_labels, predicted_labels, k)?;
    Ok(report_from_confusion(confusion))
}

pub fn report_from_confusion(confusion: Vec<Vec<usize>>) -> MetricsReport {
    let k = confusion.len();
    let total: usize = confusion.iter().flatten().sum();
    let trace: usize = (0..k).map(|i| confusion[i][i]).sum();
    let mut per_class = Vec::with_capacity(k);
    let mut excluded = Vec::new();
    for c in 0..k {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[c]).sum();
        let fp = predicted - tp;
        let fn_ = support - tp;
        let mut degenerate = false;
        let precision = if tp + fp == 0 {
            degenerate = true;
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if support == 0 {
            degenerate = true;
            0.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        if support == 0 {
            excluded.push(c);
        }
        per_class.push(ClassMetrics { precision, recall, f1, support, degenerate });
    }
    let included: Vec<&ClassMetrics> =
        per_class.iter().filter(|m| m.support > 0).collect();
    let denom = included.len().max(1) as f64;
    let macro_precision = included.iter().map(|m| m.precision).sum::<f64>() / denom;
    let macro_recall = included.iter().map(|m| m.recall).sum::<f64>() / denom;
    let macro_f1 = included.iter().map(|m| m.f1).sum::<f64>() / denom;
    let accuracy = if total == 0 { 0.0 } else { trace as f64 / total as f64 };
    MetricsReport {
        confusion,
        per_class,
        macro_precision,
        macro_recall,
        macro_f1,
        accuracy,
        excluded_classes: excluded,
    }
}

impl MetricsReport {
    /// Aligned plain-text rendering.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:>9} {:>9} {:>9} {:>8}\n",
            "class", "precision", "recall", "f1", "support"
        ));
        for (c, m) in self.per_class.iter().enumerate() {
            out.push_str(&format!(
                "{:<10} {:>9.4} {:>9.4} {:>9.4} {:>8}{}\n",
                c,
                m.precision,
                m.recall,
                m.f1,
                m.support,
                if m.degenerate { "  (degenerate)" } else { "" }
            ));
        }
        out.push_str(&format!(
            "{:<10} {:>9.4} {:>9.4} {:>9.4} {:>8}\n",
            "macro",
            self.macro_precision,
            self.macro_recall,
            self.macro_f1,
            self.confusion.iter().flatten().sum::<usize>()
        ));
        out.push_str(&format!("accuracy   {:>9.4}\n", self.accuracy));
        out
    }
}
