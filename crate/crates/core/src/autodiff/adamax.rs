use serde::{Deserialize, Serialize};

use super::AutodiffError;

/// Adamax hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamaxConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamaxConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adamax (the infinity-norm variant of Adam).
///
/// ```text
/// m ← β₁ m + (1 − β₁) g
/// u ← max(β₂ u, |g|)
/// θ ← θ − lr / (1 − β₁ᵗ) · m / (u + ε)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct AdamaxState {
    pub config: AdamaxConfig,
    m: Vec<f64>,
    u: Vec<f64>,
    t: u64,
}

impl AdamaxState {
    pub fn new(config: AdamaxConfig, num_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; num_params],
            u: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn inf_norm(&self) -> &[f64] {
        &self.u
    }

    /// Applies one update in place. Non-finite gradients leave both the
    /// parameters and the state untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), AutodiffError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(AutodiffError::ParamLength {
                expected: self.m.len(),
                got: grads.len().min(params.len()),
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(AutodiffError::NonFiniteGradient(i));
        }
        let AdamaxConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.t += 1;
        let step = lr / (1.0 - beta1.powi(self.t as i32));
        for (((p, &g), m), u) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.u)
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *u = (beta2 * *u).max(g.abs());
            *p -= step * *m / (*u + eps);
        }
        Ok(())
    }
}
