//! Huber loss on raw-scale residuals.

use crate::error::{Error, Result};

/// Mean Huber loss over a residual vector: quadratic (`r^2 / 2`) inside
/// `|r| <= delta`, linear (`delta * (|r| - delta / 2)`) outside. Residuals
/// and delta share the target unit (milligrams throughout this crate;
/// targets are never normalized).
pub fn huber(residuals: &[f64], delta: f64) -> Result<f64> {
    if residuals.is_empty() {
        return Err(Error::EmptyResiduals);
    }
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::InvalidConfig {
            msg: format!("huber delta must be positive, got {delta}"),
        });
    }
    let mut acc = 0.0;
    for &r in residuals {
        let a = r.abs();
        acc += if a <= delta {
            0.5 * r * r
        } else {
            delta * (a - 0.5 * delta)
        };
    }
    Ok(acc / residuals.len() as f64)
}

/// Derivative of the per-residual Huber term: `r` clamped to `[-delta, delta]`.
pub(crate) fn huber_grad(r: f64, delta: f64) -> f64 {
    r.clamp(-delta, delta)
}
