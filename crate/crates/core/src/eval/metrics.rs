use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.fp + self.tn
    }

    /// TP / (TP + FN).
    pub fn sensitivity(&self) -> Result<f64> {
        ratio(self.tp, self.positives(), "sensitivity")
    }

    /// FP / (FP + TN).
    pub fn false_alarm_rate(&self) -> Result<f64> {
        ratio(self.fp, self.negatives(), "false alarm rate")
    }

    pub fn specificity(&self) -> Result<f64> {
        ratio(self.tn, self.negatives(), "specificity")
    }

    pub fn accuracy(&self) -> Result<f64> {
        ratio(self.tp + self.tn, self.total(), "accuracy")
    }

    /// Mean of sensitivity and specificity; 0.5 for any constant predictor.
    pub fn balanced_accuracy(&self) -> Result<f64> {
        Ok((self.sensitivity()? + self.specificity()?) / 2.0)
    }
}

fn ratio(num: usize, den: usize, metric: &'static str) -> Result<f64> {
    if den == 0 {
        return Err(Error::UndefinedMetric { metric });
    }
    Ok(num as f64 / den as f64)
}

/// Tallies predictions against 0/1 labels; a window is flagged when `p ≥ threshold`.
pub fn confusion(predictions: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p >= threshold, y == 1) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, true) => cm.fn_ += 1,
            (false, false) => cm.tn += 1,
        }
    }
    Ok(cm)
}

pub fn sensitivity(cm: &ConfusionMatrix) -> Result<f64> {
    cm.sensitivity()
}

pub fn false_alarm_rate(cm: &ConfusionMatrix) -> Result<f64> {
    cm.false_alarm_rate()
}

/// Constant prediction of the training majority class.
pub fn majority_predictions(train_labels: &[u8], n: usize) -> Vec<f64> {
    let positives = train_labels.iter().filter(|&&y| y == 1).count();
    let p = if 2 * positives > train_labels.len() { 1.0 } else { 0.0 };
    vec![p; n]
}

/// The metrics document written for one evaluated model. Undefined rates are `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub zone: String,
    pub stacking: usize,
    pub sensitivity: Option<f64>,
    pub false_alarm_rate: Option<f64>,
    pub threshold: f64,
    pub counts: ConfusionMatrix,
}

impl MetricsReport {
    pub fn new(model: &str, zone: &str, stacking: usize, threshold: f64, counts: ConfusionMatrix) -> Self {
        Self {
            model: model.to_string(),
            zone: zone.to_string(),
            stacking,
            sensitivity: counts.sensitivity().ok(),
            false_alarm_rate: counts.false_alarm_rate().ok(),
            threshold,
            counts,
        }
    }
}
