//! Plain (tape-free) loss evaluation.
//!
//! Training goes through the tape ops; these direct forms serve evaluation
//! loops and reporting.

use crate::error::{Error, Result};
use crate::labels::LabelVector;
use crate::lrg::BinaryMask;

/// Probabilities are clamped to [BCE_EPS, 1-BCE_EPS] before taking logs.
pub const BCE_EPS: f64 = 1e-7;

/// Mean binary cross-entropy between 0/1 targets and predicted probabilities.
pub fn bce_loss(truth: &LabelVector, predicted: &[f64]) -> Result<f64> {
    bce_slices(truth.as_slice(), predicted)
}

/// BCE over arbitrary equal-length slices.
pub fn bce_slices(truth: &[f64], predicted: &[f64]) -> Result<f64> {
    if truth.len() != predicted.len() {
        return Err(Error::LengthMismatch(format!(
            "bce: {} targets vs {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::LengthMismatch("bce on empty input".into()));
    }
    let mut s = 0.0;
    for (&y, &p) in truth.iter().zip(predicted) {
        let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        s += y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
    }
    Ok(-s / truth.len() as f64)
}

/// Mean per-pixel binary cross-entropy of a probability map against a mask.
pub fn pixelwise_ce(truth_mask: &BinaryMask, predicted: &[f64]) -> Result<f64> {
    if truth_mask.len() != predicted.len() {
        return Err(Error::ShapeMismatch(format!(
            "pixelwise_ce: mask has {} pixels, prediction has {}",
            truth_mask.len(),
            predicted.len()
        )));
    }
    let truth: Vec<f64> = truth_mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    bce_slices(&truth, predicted)
}
