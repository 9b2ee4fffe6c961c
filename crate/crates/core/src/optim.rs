//! AdamW with decoupled weight decay, and a constant-warmup cosine schedule.
//!
//! ```text
//! w ← w − lr·wd·w
//! m ← β1·m + (1 − β1)·g
//! v ← β2·v + (1 − β2)·g²
//! w ← w − lr · (m / (1 − β1^t)) / (√(v / (1 − β2^t)) + ε)
//! ```

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterGrads, AdapterWeights};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr_base: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr_base: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Moment estimates for the three adapter matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: AdapterWeights<f32>,
    pub v: AdapterWeights<f32>,
    pub step: u64,
    pub config: AdamWConfig,
}

impl OptimState {
    pub fn new(dim: usize, config: AdamWConfig) -> Self {
        OptimState {
            m: AdapterWeights::zeros(dim),
            v: AdapterWeights::zeros(dim),
            step: 0,
            config,
        }
    }

    /// One AdamW update of every matrix at learning rate `lr`.
    pub fn step(
        &mut self,
        weights: &mut AdapterWeights<f32>,
        grads: &AdapterGrads<f32>,
        lr: f64,
    ) -> Result<()> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::Config(format!("learning rate must be nonnegative, got {lr}")));
        }
        let dim = weights.dim();
        for m in grads.iter().chain(self.m.iter()).chain(self.v.iter()) {
            if m.shape() != (dim, dim) {
                return Err(Error::dims(
                    "optimizer step",
                    format!("{dim}x{dim}"),
                    format!("{:?}", m.shape()),
                ));
            }
        }
        self.step += 1;
        let cfg = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (((w, g), m), v) in weights
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            update_matrix(w, g, m, v, lr, bc1, bc2, &cfg);
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn update_matrix(
    w: &mut Matrix<f32>,
    g: &Matrix<f32>,
    m: &mut Matrix<f32>,
    v: &mut Matrix<f32>,
    lr: f64,
    bc1: f64,
    bc2: f64,
    cfg: &AdamWConfig,
) {
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let decay = (1.0 - lr * cfg.weight_decay) as f32;
    let (lr, eps) = (lr as f32, cfg.eps as f32);
    let (bc1, bc2) = (bc1 as f32, bc2 as f32);
    for (((w, &g), m), v) in w
        .as_mut_slice()
        .iter_mut()
        .zip(g.as_slice())
        .zip(m.as_mut_slice())
        .zip(v.as_mut_slice())
    {
        *w *= decay;
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *w -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Constant warmup for the first epochs, then cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr_base: f64,
    pub warmup_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_lr > self.lr_base {
            return Err(Error::Config(format!(
                "warmup lr {} exceeds base lr {}",
                self.warmup_lr, self.lr_base
            )));
        }
        if self.total_epochs < self.warmup_epochs {
            return Err(Error::Config(format!(
                "{} total epochs is shorter than {} warmup epochs",
                self.total_epochs, self.warmup_epochs
            )));
        }
        if self.steps_per_epoch == 0 {
            return Err(Error::Config("steps per epoch must be positive".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        let total = self.total_steps();
        if step >= total {
            return Err(Error::StepOutOfRange { step, total });
        }
        let warm = self.warmup_epochs * self.steps_per_epoch;
        if step < warm {
            return Ok(self.warmup_lr);
        }
        let progress = (step - warm) as f64 / (total - warm) as f64;
        Ok(self.lr_base * 0.5 * (1.0 + (PI * progress).cos()))
    }
}
