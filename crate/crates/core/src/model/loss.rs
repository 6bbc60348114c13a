//! Per-output binary cross-entropy.

use crate::error::{Error, Result};

/// Predictions are clipped to `[BCE_EPS, 1 - BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

fn check(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions but {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::invalid("empty prediction vector"));
    }
    Ok(())
}

/// Mean over outputs of `-(t ln p + (1 - t) ln(1 - p))`.
pub fn bce_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    check(pred, target)?;
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Derivative of [`bce_loss`] with respect to each prediction. Zero where
/// the clip is active.
pub fn bce_grad(pred: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    check(pred, target)?;
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                0.0
            } else {
                (p - t) / (p * (1.0 - p)) / n
            }
        })
        .collect())
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Loss and its gradient with respect to the logits, computed together.
/// Uses the fused form `(sigmoid(z) - t) / n`, which stays finite when the
/// sigmoid saturates.
pub(crate) fn bce_with_logits(logits: &[f32], target: &[f32]) -> (f64, Vec<f32>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(target)
        .map(|(&z, &t)| {
            let p = sigmoid(z as f64);
            let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            let t = t as f64;
            loss -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
            ((p - t) / n) as f32
        })
        .collect();
    (loss / n, grad)
}
