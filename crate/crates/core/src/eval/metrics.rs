use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predict, WfModel};
use crate::traffic::SampleVector;

/// Classification metrics with the confusion matrix they derive from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    /// `confusion[truth][prediction]` counts.
    pub confusion: Vec<Vec<u64>>,
    pub total: u64,
}

impl EvalReport {
    pub fn class_count(&self) -> usize {
        self.confusion.len()
    }

    /// Test samples of each class (row sums).
    pub fn support(&self) -> Vec<u64> {
        self.confusion.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn macro_f1(&self) -> f64 {
        if self.f1.is_empty() {
            0.0
        } else {
            self.f1.iter().sum::<f64>() / self.f1.len() as f64
        }
    }
}

fn safe_div(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Accuracy, per-class precision, recall and F1. Undefined ratios (0/0) are 0.
pub fn compute_metrics(predictions: &[usize], truth: &[usize], class_count: usize) -> Result<EvalReport> {
    if predictions.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    if let Some(&bad) = predictions.iter().chain(truth).find(|&&l| l >= class_count) {
        return Err(Error::Data(format!("label {bad} out of range for {class_count} classes")));
    }
    let mut confusion = vec![vec![0u64; class_count]; class_count];
    for (&p, &t) in predictions.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let total = truth.len() as u64;
    let correct: u64 = (0..class_count).map(|c| confusion[c][c]).sum();
    let mut precision = Vec::with_capacity(class_count);
    let mut recall = Vec::with_capacity(class_count);
    let mut f1 = Vec::with_capacity(class_count);
    for c in 0..class_count {
        let tp = confusion[c][c];
        let predicted: u64 = confusion.iter().map(|r| r[c]).sum();
        let actual: u64 = confusion[c].iter().sum();
        let p = safe_div(tp, predicted);
        let r = safe_div(tp, actual);
        precision.push(p);
        recall.push(r);
        f1.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
    }
    Ok(EvalReport {
        accuracy: safe_div(correct, total),
        precision,
        recall,
        f1,
        confusion,
        total,
    })
}

/// Metrics of `model` on labelled samples.
pub fn evaluate(model: &WfModel, samples: &[SampleVector]) -> Result<EvalReport> {
    let pred = predict(model, samples)?;
    let truth: Vec<usize> = samples.iter().map(|s| usize::from(s.site_label)).collect();
    compute_metrics(&pred.labels, &truth, model.net.class_count())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_hand_count() {
        let r = compute_metrics(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.precision[1], 2.0 / 3.0);
        assert_eq!(r.recall[1], 1.0);
        assert_eq!(r.support(), vec![2, 2]);
    }

    #[test]
    fn never_predicted_class_has_zero_precision() {
        let r = compute_metrics(&[0, 0, 0], &[0, 1, 2], 3).unwrap();
        assert_eq!((r.precision[1], r.recall[1], r.f1[1]), (0.0, 0.0, 0.0));
        assert!(compute_metrics(&[0], &[3], 3).is_err());
        assert!(compute_metrics(&[0, 1], &[0], 3).is_err());
    }
}
