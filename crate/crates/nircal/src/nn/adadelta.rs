//! Adadelta parameter updates with per-weight running accumulators.

use super::model::{CnnModel, Gradients};
use super::tensors::Tensors;
use crate::error::{Error, Result};

/// Running second-moment estimates for Adadelta: one accumulator pair per
/// weight, both starting at zero.
#[derive(Debug, Clone)]
pub struct AdadeltaState {
    sq_grad: Tensors,
    sq_step: Tensors,
}

impl AdadeltaState {
    pub fn new(spec: &super::CnnSpec) -> Self {
        AdadeltaState {
            sq_grad: Tensors::zeros(spec),
            sq_step: Tensors::zeros(spec),
        }
    }
}

/// One Adadelta update, applied in place:
///
/// ```text
/// E[g^2]  <- rho E[g^2] + (1 - rho) g^2
/// dx      <- -lr sqrt((E[dx^2] + eps) / (E[g^2] + eps)) g
/// E[dx^2] <- rho E[dx^2] + (1 - rho) dx^2
/// w       <- w + dx
/// ```
///
/// The step accumulator is updated with the *scaled* step, so the learning
/// rate feeds back into future step sizes exactly as it entered this one.
pub fn adadelta_step(
    model: &mut CnnModel,
    state: &mut AdadeltaState,
    grads: &Gradients,
    learning_rate: f64,
    rho: f64,
    epsilon: f64,
) -> Result<()> {
    if !(learning_rate.is_finite() && learning_rate > 0.0) {
        return Err(Error::InvalidConfig {
            msg: format!("learning rate must be positive, got {learning_rate}"),
        });
    }
    if !(rho.is_finite() && (0.0..1.0).contains(&rho)) {
        return Err(Error::InvalidConfig {
            msg: format!("decay rho must lie in [0, 1), got {rho}"),
        });
    }
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidConfig {
            msg: format!("epsilon must be positive, got {epsilon}"),
        });
    }
    if !grads.t.same_shape(&state.sq_grad) || !grads.t.same_shape(model.weights()) {
        return Err(Error::InvalidNetworkShape {
            msg: "gradient shapes do not match the model".into(),
        });
    }
    if !grads.t.is_finite() {
        return Err(Error::NonFinite {
            what: "gradients".into(),
        });
    }

    model.apply_update(|weights| {
        let ws = weights.slices_mut();
        let gs = grads.t.slices();
        let eg = state.sq_grad.slices_mut();
        let ex = state.sq_step.slices_mut();
        for (((w_t, g_t), eg_t), ex_t) in ws.into_iter().zip(gs).zip(eg).zip(ex) {
            for i in 0..w_t.len() {
                let g = g_t[i];
                eg_t[i] = rho * eg_t[i] + (1.0 - rho) * g * g;
                let dx = -learning_rate * ((ex_t[i] + epsilon) / (eg_t[i] + epsilon)).sqrt() * g;
                ex_t[i] = rho * ex_t[i] + (1.0 - rho) * dx * dx;
                w_t[i] += dx;
            }
        }
    });
    Ok(())
}
