use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::error::{param_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(param_err(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(param_err("betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(param_err("eps must be positive and weight decay nonnegative"));
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay (decay applied to the weights, not
/// folded into the gradient). Moments live on each [`crate::Parameter`].
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdamW { config, step: 0 })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(param_err(format!("learning rate must be positive, got {lr}")));
        }
        self.config.lr = lr;
        Ok(())
    }

    /// One update of every parameter; missing gradients count as zero.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for p in store.params_mut() {
            let shape = p.value.shape().to_vec();
            let m = p.moment1.get_or_insert_with(|| Tensor::zeros(&shape));
            let v = p.moment2.get_or_insert_with(|| Tensor::zeros(&shape));
            let g = p.grad.as_ref();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                let mi = &mut m.data_mut()[i];
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = m.data()[i] / bc1;
                let vhat = v.data()[i] / bc2;
                w[i] -= c.lr * c.weight_decay * w[i];
                w[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}
