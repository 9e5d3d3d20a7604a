//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Per-parameter Adam state (first/second moment estimates and step count).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step_count: u64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamState {
    /// Fresh state for a parameter of `numel` elements.
    pub fn new(numel: usize, lr: f32) -> Self {
        AdamState {
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Consumes and clears `param.grad`.
pub fn adam_step(param: &mut Tensor, state: &mut AdamState) -> Result<()> {
    let grad = param
        .grad
        .take()
        .ok_or_else(|| Error::contract("adam_step: parameter has no gradient"))?;
    if grad.len() != param.data.len() || state.m.len() != param.data.len() {
        return Err(Error::contract(format!(
            "adam_step: size mismatch (param {}, grad {}, state {})",
            param.data.len(),
            grad.len(),
            state.m.len()
        )));
    }
    state.step_count += 1;
    let t = state.step_count as f64;
    let bc1 = 1.0 - (state.beta1 as f64).powf(t);
    let bc2 = 1.0 - (state.beta2 as f64).powf(t);
    for i in 0..param.data.len() {
        let g = grad[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1 as f32;
        let v_hat = state.v[i] / bc2 as f32;
        param.data[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}
