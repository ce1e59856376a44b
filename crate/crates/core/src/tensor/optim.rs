// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config }
    }

    /// Applies one update to `param` in place. `step` counts from 1.
    /// `decay` selects whether weight decay applies to this parameter.
    #[allow(clippy::too_many_arguments)]
    pub fn update(
        &self,
        name: &str,
        param: &mut [f64],
        grad: &[f64],
        state: &mut AdamState,
        step: u64,
        lr: f64,
        decay: bool,
    ) -> Result<()> {
        if param.len() != grad.len() || state.m.len() != param.len() || state.v.len() != param.len()
        {
            return Err(LabError::Shape {
                op: "adamw",
                lhs: vec![param.len()],
                rhs: vec![grad.len(), state.m.len(), state.v.len()],
            });
        }
        if step == 0 {
            return Err(LabError::InvalidArgument("adamw step counter starts at 1".into()));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(LabError::NonFiniteGradient(name.to_string()));
        }
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(step as i32);
        let bc2 = 1.0 - c.beta2.powi(step as i32);
        let wd = if decay { c.weight_decay } else { 0.0 };
        for (((p, &g), m), v) in param
            .iter_mut()
            .zip(grad)
            .zip(state.m.iter_mut())
            .zip(state.v.iter_mut())
        {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * wd * *p;
            *p -= lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let total = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let scale = max_norm / (total + 1e-6);
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|x| *x *= scale);
        }
    }
    total
}
