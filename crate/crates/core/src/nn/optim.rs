//! Adam and plain gradient descent, both with a learning-rate multiplier used
//! when fine-tuning a pre-trained model.
//!
//! Updated parameters are rounded to `f32` so that a checkpoint written with
//! 32-bit payloads restores training state exactly.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Adam(AdamConfig),
    Sgd { lr: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam(AdamConfig::default())
    }
}

impl Optimizer {
    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Adam(c) => c.lr,
            Optimizer::Sgd { lr } => *lr,
        }
    }
}

#[inline]
fn q(v: f64) -> f64 {
    v as f32 as f64
}

/// One bias-corrected Adam step on a parameter slice at step `t >= 1`.
/// `lr` overrides `cfg.lr` so callers can apply a multiplier.
pub fn adam_update(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &AdamConfig, lr: f64) {
    assert!(t >= 1, "Adam step counter starts at 1");
    assert!(params.len() == grads.len() && m.len() == grads.len() && v.len() == grads.len());
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for k in 0..params.len() {
        let g = grads[k];
        m[k] = q(cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g);
        v[k] = q(cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g);
        if lr == 0.0 {
            continue;
        }
        let step = lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + cfg.eps);
        params[k] = q(params[k] - step);
    }
}

/// `(1 - alpha) * p + alpha * (p - lr * g)`, evaluated as written.
#[inline]
pub fn scaled_step(p: f64, g: f64, lr: f64, alpha: f64) -> f64 {
    (1.0 - alpha) * p + alpha * (p - lr * g)
}

/// [`scaled_step`] over a slice, rounded to `f32`.
pub fn scaled_descent(params: &mut [f64], grads: &[f64], lr: f64, alpha: f64) {
    assert_eq!(params.len(), grads.len());
    for (p, g) in params.iter_mut().zip(grads) {
        *p = q(scaled_step(*p, *g, lr, alpha));
    }
}

/// Optimizer choice plus per-slot moment buffers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub optimizer: Optimizer,
    /// Learning-rate multiplier; 1 for training from scratch.
    pub lr_scale: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(optimizer: Optimizer, lr_scale: f64, slot_lens: &[usize]) -> Self {
        let (m, v) = match optimizer {
            Optimizer::Adam(_) => (
                slot_lens.iter().map(|&n| vec![0.0; n]).collect(),
                slot_lens.iter().map(|&n| vec![0.0; n]).collect(),
            ),
            Optimizer::Sgd { .. } => (Vec::new(), Vec::new()),
        };
        Self { optimizer, lr_scale, t: 0, m, v }
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Applies the current step to one parameter slot.
    pub fn update_slot(&mut self, slot: usize, params: &mut [f64], grads: &[f64]) {
        match self.optimizer {
            Optimizer::Adam(cfg) => {
                let lr = cfg.lr * self.lr_scale;
                adam_update(params, grads, &mut self.m[slot], &mut self.v[slot], self.t.max(1), &cfg, lr);
            }
            Optimizer::Sgd { lr } => scaled_descent(params, grads, lr, self.lr_scale),
        }
    }
}
