//! AdamW with decoupled weight decay and an exponential learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Parameterized;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            weight_decay: 0.02,
            beta1: 0.99,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |b: f64| b > 0.0 && b < 1.0;
        if !ok(self.beta1) || !ok(self.beta2) {
            return Err(Error::InvalidInput(format!(
                "betas must lie in (0,1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 {
            return Err(Error::InvalidInput(
                "weight decay must be >= 0 and eps > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Per-tensor first and second moments plus the shared step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: OptimizerConfig,
    pub lr: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new<P: Parameterized + ?Sized>(model: &P, lr: f64, config: OptimizerConfig) -> Self {
        let specs = model.param_specs();
        let slices = model.param_slices();
        Self {
            config,
            lr,
            step: 0,
            first: slices.iter().map(|s| vec![0.0; s.len()]).collect(),
            second: slices.iter().map(|s| vec![0.0; s.len()]).collect(),
            decay: specs.iter().map(|s| s.decay).collect(),
        }
    }

    /// Clears moments and the step count, keeping the learning rate.
    pub fn reset(&mut self) {
        self.step = 0;
        self.first.iter_mut().flatten().for_each(|v| *v = 0.0);
        self.second.iter_mut().flatten().for_each(|v| *v = 0.0);
    }

    /// One update. `grads` follows the model's canonical parameter order.
    pub fn step<P: Parameterized + ?Sized>(
        &mut self,
        model: &mut P,
        grads: &[Vec<f64>],
    ) -> Result<()> {
        let mut params = model.param_slices_mut();
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::mismatch(
                params.len(),
                grads.len(),
                "optimizer tensor count",
            ));
        }
        if self.lr == 0.0 {
            return Ok(());
        }
        self.step += 1;
        let OptimizerConfig {
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (t, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::mismatch(p.len(), g.len(), "optimizer tensor length"));
            }
            let decay = if self.decay[t] {
                1.0 - self.lr * weight_decay
            } else {
                1.0
            };
            let (m, v) = (&mut self.first[t], &mut self.second[t]);
            for i in 0..p.len() {
                p[i] *= decay;
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Exponential schedule: `lr <- lr * gamma`.
    pub fn decay_lr(&mut self, gamma: f64) {
        self.lr *= gamma;
    }
}
