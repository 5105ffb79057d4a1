//! Classification quality measures from a pooled confusion matrix.

use crate::error::{Error, Result};

/// Accuracy measures over one evaluation pass. "Present" classes are those
/// that occur in the targets; absent classes do not dilute the means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// Correct predictions over all rows.
    pub overall: f64,
    /// Unweighted mean of per-class recall over present classes.
    pub mean_class: f64,
    /// Mean intersection-over-union over present classes.
    pub mean_iou: f64,
}

/// Computes metrics from aligned prediction/target label slices.
pub fn metrics(preds: &[usize], targets: &[usize], class_count: usize) -> Result<Metrics> {
    if preds.is_empty() {
        return Err(Error::Data("metrics need at least one prediction".into()));
    }
    if preds.len() != targets.len() {
        return Err(Error::Data(format!(
            "{} predictions against {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let mut confusion = vec![0usize; class_count * class_count];
    for (&p, &t) in preds.iter().zip(targets) {
        if p >= class_count || t >= class_count {
            return Err(Error::Data(format!(
                "label out of range: prediction {p}, target {t}, {class_count} classes"
            )));
        }
        confusion[t * class_count + p] += 1;
    }
    let row_sum = |c: usize| -> usize { (0..class_count).map(|p| confusion[c * class_count + p]).sum() };
    let col_sum = |c: usize| -> usize { (0..class_count).map(|t| confusion[t * class_count + c]).sum() };
    let mut correct = 0usize;
    let mut recall_sum = 0.0;
    let mut iou_sum = 0.0;
    let mut present = 0usize;
    for c in 0..class_count {
        let tp = confusion[c * class_count + c];
        correct += tp;
        let support = row_sum(c);
        if support == 0 {
            continue;
        }
        present += 1;
        recall_sum += tp as f64 / support as f64;
        // Union = TP + FP + FN; support > 0 keeps it positive.
        let union = support + col_sum(c) - tp;
        iou_sum += tp as f64 / union as f64;
    }
    Ok(Metrics {
        overall: correct as f64 / preds.len() as f64,
        mean_class: recall_sum / present as f64,
        mean_iou: iou_sum / present as f64,
    })
}
