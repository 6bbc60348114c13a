use crate::error::{Error, Result};

use super::train::TrainConfig;

/// Geometric decay from `lr_start` at epoch 0 to `lr_end` at the last epoch.
/// Both endpoints are returned exactly.
pub fn lr_at(epoch: usize, tc: &TrainConfig) -> Result<f64> {
    if epoch >= tc.epochs {
        return Err(Error::invalid(format!(
            "epoch {epoch} out of range for {} epochs",
            tc.epochs
        )));
    }
    if epoch == 0 {
        return Ok(tc.lr_start);
    }
    if epoch == tc.epochs - 1 {
        return Ok(tc.lr_end);
    }
    let frac = epoch as f64 / (tc.epochs - 1) as f64;
    let lr = tc.lr_start * (tc.lr_end / tc.lr_start).powf(frac);
    Ok(lr.clamp(tc.lr_end, tc.lr_start))
}
