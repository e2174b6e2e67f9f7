use serde::{Deserialize, Serialize};

use crate::bnn::ParamBlock;
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
            lr: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok =
            self.lr > 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam hyperparameters {self:?}")))
        }
    }
}

/// First and second moment buffers, shaped like the parameter blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(blocks: &[ParamBlock]) -> Self {
        Self {
            m: blocks.iter().map(|b| vec![0.0; b.values.len()]).collect(),
            v: blocks.iter().map(|b| vec![0.0; b.values.len()]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam descent step. Rejects non-finite gradients before
/// touching any parameter.
pub fn adam_step(blocks: &mut [ParamBlock], grads: &[Vec<f64>], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != blocks.len() || state.m.len() != blocks.len() {
        return Err(Error::Invalid(format!(
            "adam_step: {} blocks, {} gradients, {} buffers",
            blocks.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (b, g) in blocks.iter().zip(grads) {
        if g.len() != b.values.len() {
            return Err(Error::Invalid(format!(
                "adam_step: gradient for `{}` has wrong length",
                b.name
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(b.name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((b, g), m), v) in blocks.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            b.values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
