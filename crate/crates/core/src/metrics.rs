//! Recovery metrics: RRMSE and the sensitivity/specificity of thresholded
//! viral loads.

use crate::error::{param, Error, Result};
use crate::numerics::DenseVector;

/// Default viral-load threshold for a positive call.
pub const DEFAULT_THRESHOLD: f64 = 0.2;

/// `‖x* − x̂‖₂ / ‖x*‖₂`.
pub fn rrmse(x_star: &DenseVector, x_hat: &DenseVector) -> Result<f64> {
    if x_star.len() != x_hat.len() {
        return Err(param(format!(
            "length mismatch: {} vs {}",
            x_star.len(),
            x_hat.len()
        )));
    }
    let denom = x_star.dot(x_star).sqrt();
    if !(denom > 0.0) {
        return Err(Error::UndefinedMetric("RRMSE of a zero ground truth".into()));
    }
    let d = x_star - x_hat;
    Ok(d.dot(&d).sqrt() / denom)
}

/// Positive iff `x_k > threshold` (strict, so a load exactly at the
/// threshold is negative).
pub fn classify(x: &DenseVector, threshold: f64) -> Vec<bool> {
    x.iter().map(|&v| v > threshold).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

pub fn confusion(truth: &[bool], pred: &[bool]) -> Result<Confusion> {
    if truth.len() != pred.len() {
        return Err(param(format!(
            "label length mismatch: {} vs {}",
            truth.len(),
            pred.len()
        )));
    }
    let mut c = Confusion::default();
    for (&t, &p) in truth.iter().zip(pred) {
        match (t, p) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fp += 1,
            (true, false) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// `TP / (TP + FN)`, `None` without positive samples.
pub fn sensitivity(c: &Confusion) -> Option<f64> {
    let d = c.tp + c.fn_;
    (d > 0).then(|| c.tp as f64 / d as f64)
}

/// `TN / (TN + FP)`, `None` without negative samples.
pub fn specificity(c: &Confusion) -> Option<f64> {
    let d = c.tn + c.fp;
    (d > 0).then(|| c.tn as f64 / d as f64)
}
