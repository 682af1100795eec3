use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "Adam betas must lie in [0, 1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("Adam eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update over every entry of `store`, then zeroes the gradients.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) -> Result<()> {
    cfg.validate()?;
    store.step += 1;
    let t = store.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let precision = store.precision;
    for (_, p) in store.iter_mut() {
        let n = p.value.len();
        let value = p.value.as_slice_mut().expect("standard layout");
        let grad = p.grad.as_slice_mut().expect("standard layout");
        let m = p.m.as_slice_mut().expect("standard layout");
        let v = p.v.as_slice_mut().expect("standard layout");
        for i in 0..n {
            let g = grad[i];
            m[i] = precision.round(cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g);
            v[i] = precision.round(cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g);
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            value[i] = precision.round(value[i] - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps));
            grad[i] = 0.0;
        }
    }
    Ok(())
}
