use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// AdamW with bias-corrected moments and decoupled weight decay.
///
/// Moments are stored per parameter slot; callers must pass parameters in
/// the same order on every step.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// Per-slot hyperparameters for one update.
#[derive(Clone, Copy, Debug)]
pub struct SlotHyper {
    pub lr: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(sizes: &[usize]) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update from the gradients stored on the tensors. A tensor with no
    /// gradient is treated as having a zero gradient. Any non-finite gradient
    /// aborts the step before anything is modified.
    pub fn step(&mut self, params: &mut [&mut Tensor], hyper: &[SlotHyper]) -> Result<()> {
        if params.len() != self.m.len() || hyper.len() != params.len() {
            return Err(Error::State(format!(
                "optimizer holds {} slots, got {} parameters and {} settings",
                self.m.len(),
                params.len(),
                hyper.len()
            )));
        }
        for (p, m) in params.iter().zip(&self.m) {
            if p.len() != m.len() {
                return Err(Error::dim("adamw", &[m.len()], p.shape()));
            }
            if let Some(g) = p.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric("non-finite gradient; step aborted".into()));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let SlotHyper { lr, weight_decay } = hyper[i];
            let g = p.grad().map(<[f64]>::to_vec);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = p.data_mut();
            for j in 0..w.len() {
                let gj = g.as_ref().map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                w[j] -= lr * weight_decay * w[j];
                w[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `lr_max·(1+cos(π·step/total))/2`.
pub fn cosine_lr(step: u64, total: u64, lr_max: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let s = step.min(total) as f64 / total as f64;
    lr_max * (1.0 + (std::f64::consts::PI * s).cos()) / 2.0
}

/// Linear warmup over `warmup` steps, then constant.
pub fn warmup_constant_lr(step: u64, warmup: u64, lr_max: f64) -> f64 {
    if warmup == 0 || step >= warmup {
        lr_max
    } else {
        lr_max * (step + 1) as f64 / warmup as f64
    }
}

/// Scales every gradient by `max_norm/global` when the global Frobenius norm
/// exceeds `max_norm`. Returns the norm measured before scaling.
pub fn clip_grad_norm(params: &mut [&mut Tensor], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::Config(format!("clip norm must be positive, got {max_norm}")));
    }
    let total: f64 = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let s = max_norm / total;
        for p in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    Ok(total)
}
