use super::TrainConfig;
use crate::error::{Error, Result};
use crate::lm::ModelParams;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: ModelParams,
    pub second_moment: ModelParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        OptimizerState {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, after clipping the gradient to a global
/// L2 norm of `cfg.grad_clip_norm`. Returns the pre-clip gradient norm.
pub fn adam_step(
    state: &mut OptimizerState,
    params: &mut ModelParams,
    grads: &ModelParams,
    cfg: &TrainConfig,
) -> Result<f64> {
    if !params.same_shapes(grads) || !params.same_shapes(&state.first_moment) {
        return Err(Error::usage("gradient or optimizer state shape does not match parameters"));
    }
    for (name, t) in grads.tensors() {
        if let Some(i) = t.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient {} in {name}[{i}] at step {}",
                t.data[i],
                state.step + 1
            )));
        }
    }
    let norm = grads.sq_norm().sqrt();
    let clip = if norm > cfg.grad_clip_norm {
        cfg.grad_clip_norm / norm
    } else {
        1.0
    };

    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - ADAM_BETA1.powi(t);
    let bias2 = 1.0 - ADAM_BETA2.powi(t);
    let lr = cfg.learning_rate;

    let moments = state
        .first_moment
        .tensors_mut()
        .into_iter()
        .zip(state.second_moment.tensors_mut());
    for (((_, p), (_, g)), ((_, m), (_, v))) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(moments) {
        for i in 0..p.data.len() {
            let gi = g.data[i] * clip;
            m.data[i] = ADAM_BETA1 * m.data[i] + (1.0 - ADAM_BETA1) * gi;
            v.data[i] = ADAM_BETA2 * v.data[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = m.data[i] / bias1;
            let v_hat = v.data[i] / bias2;
            p.data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(norm)
}
