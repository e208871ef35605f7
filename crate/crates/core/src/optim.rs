//! AdamW with bias correction and decoupled weight decay.
//!
//! ```text
//! w <- w - lr * weight_decay * w
//! m <- beta1 * m + (1 - beta1) * g
//! v <- beta2 * v + (1 - beta2) * g^2
//! w <- w - lr * (m / (1 - beta1^t)) / (sqrt(v / (1 - beta2^t)) + eps)
//! ```

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 5e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("AdamW betas must lie in [0, 1)"));
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config("AdamW eps must be positive and weight decay non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Moments<S> {
    first: Vec<S>,
    second: Vec<S>,
}

#[derive(Clone, Debug)]
pub struct OptimizerState<S> {
    pub config: AdamWConfig,
    step_count: u64,
    moments: IndexMap<String, Moments<S>>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(OptimizerState { config, step_count: 0, moments: IndexMap::new() })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Names of the parameters that currently own moment buffers.
    pub fn tracked_params(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    pub fn first_moment(&self, name: &str) -> Option<&[S]> {
        self.moments.get(name).map(|m| m.first.as_slice())
    }

    pub fn second_moment(&self, name: &str) -> Option<&[S]> {
        self.moments.get(name).map(|m| m.second.as_slice())
    }
}

/// Applies one AdamW update to every trainable parameter. Gradients are read, not cleared.
pub fn adamw_step<S: Scalar>(params: &mut ParamSet<S>, state: &mut OptimizerState<S>) -> Result<()> {
    for (name, t) in params.iter() {
        if t.requires_grad && t.grad().is_none() {
            return Err(Error::contract(format!("parameter `{name}` has no gradient")));
        }
    }
    state.moments.retain(|name, _| params.get(name).is_some_and(|t| t.requires_grad));

    state.step_count += 1;
    let cfg = state.config;
    let t = state.step_count as i32;
    let lr = S::from_f64_lossy(cfg.lr);
    let b1 = S::from_f64_lossy(cfg.beta1);
    let b2 = S::from_f64_lossy(cfg.beta2);
    let eps = S::from_f64_lossy(cfg.eps);
    let decay = S::from_f64_lossy(1.0 - cfg.lr * cfg.weight_decay);
    let bc1 = S::from_f64_lossy(1.0 - cfg.beta1.powi(t));
    let bc2 = S::from_f64_lossy(1.0 - cfg.beta2.powi(t));
    let one = S::one();

    for (name, tensor) in params.iter_mut() {
        if !tensor.requires_grad {
            continue;
        }
        let grad = tensor.grad().expect("checked above").to_vec();
        let m = state.moments.entry(name.to_string()).or_insert_with(|| Moments {
            first: vec![S::zero(); grad.len()],
            second: vec![S::zero(); grad.len()],
        });
        for (((w, &g), m1), m2) in
            tensor.data_mut().iter_mut().zip(&grad).zip(m.first.iter_mut()).zip(m.second.iter_mut())
        {
            if cfg.weight_decay != 0.0 {
                *w = *w * decay;
            }
            *m1 = b1 * *m1 + (one - b1) * g;
            *m2 = b2 * *m2 + (one - b2) * g * g;
            let m_hat = *m1 / bc1;
            let v_hat = *m2 / bc2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
