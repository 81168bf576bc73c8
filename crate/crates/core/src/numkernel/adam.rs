use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment estimates for one parameter store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(num_params: usize, config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::config("Adam learning rate must be positive"));
        }
        if config.weight_decay < 0.0 {
            return Err(Error::config("weight decay must be non-negative"));
        }
        Ok(Self {
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step_count: 0,
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            weight_decay: config.weight_decay,
        })
    }
}

/// One Adam update with decoupled weight decay:
/// `θ ← θ·(1 − lr·wd)` followed by the bias-corrected Adam delta.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) {
    assert_eq!(params.len(), grads.len(), "parameter/gradient length mismatch");
    assert_eq!(params.len(), state.first_moment.len(), "optimizer state length mismatch");
    state.step_count += 1;
    let t = state.step_count as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    let decay = 1.0 - state.lr * state.weight_decay;
    for i in 0..params.len() {
        let g = grads[i];
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        if state.weight_decay != 0.0 {
            params[i] *= decay;
        }
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
}
