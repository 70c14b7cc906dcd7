use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};
use super::AdError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the gradient when its global L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), AdError> {
    if !(cfg.beta1 > 0.0 && cfg.beta1 < 1.0 && cfg.beta2 > 0.0 && cfg.beta2 < 1.0) {
        return Err(AdError::Contract(format!(
            "Adam betas must lie in (0,1), got ({}, {})",
            cfg.beta1, cfg.beta2
        )));
    }
    for (id, g) in grads.iter() {
        let p = store.tensor(id).ok_or_else(|| AdError::UnknownParameter(id.clone()))?;
        if p.shape() != g.shape() {
            return Err(AdError::ParamShape {
                id: id.clone(),
                expected: p.shape().to_vec(),
                found: g.shape().to_vec(),
            });
        }
    }
    let clip = match cfg.clip_norm {
        Some(max) => {
            let norm = grads.global_norm();
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (id, g) in grads.iter() {
        let n = g.numel();
        let (m, v) = state
            .moments
            .entry(id.clone())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let p = store.tensor_mut(id).expect("checked above");
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let gi = gi * clip;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
