//! Adam with global-norm gradient clipping, and a batched training step.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::model::{Model, TrainExample};
use crate::objectives::LossBreakdown;

pub const DEFAULT_CLIP_NORM: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: DEFAULT_CLIP_NORM, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Clips `grad` to the global norm limit, then updates `params`. Returns
    /// the norm before clipping.
    pub fn step(&mut self, params: &mut [f64], grad: &mut [f64]) -> f64 {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        let norm = libm::sqrt(grad.iter().map(|g| g * g).sum::<f64>());
        if self.clip_norm > 0.0 && norm > self.clip_norm {
            let s = self.clip_norm / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        self.t += 1;
        let b1t = 1.0 - libm::pow(self.beta1, self.t as f64);
        let b2t = 1.0 - libm::pow(self.beta2, self.t as f64);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= self.lr * mh / (libm::sqrt(vh) + self.eps);
        }
        norm
    }
}

/// Outcome of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

/// Mean loss and gradient over `batch`, without updating anything.
pub fn batch_gradient(model: &Model, params: &[f64], batch: &[TrainExample]) -> Result<(LossBreakdown, Vec<f64>)> {
    if batch.is_empty() {
        return Err(domain!("empty batch"));
    }
    let mut grad = vec![0.0; params.len()];
    let mut losses = Vec::with_capacity(batch.len());
    for ex in batch {
        losses.push(model.loss_and_grad(params, &mut grad, ex)?);
    }
    let scale = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((LossBreakdown::mean(&losses).expect("non-empty batch"), grad))
}

/// One Adam step on the mean loss of `batch`. Parameters are left untouched
/// when the loss or gradient is not finite.
pub fn train_step(model: &Model, params: &mut [f64], opt: &mut Adam, batch: &[TrainExample]) -> Result<StepReport> {
    let (loss, mut grad) = batch_gradient(model, params, batch)?;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(domain!("non-finite loss or gradient"));
    }
    let grad_norm = opt.step(params, &mut grad);
    Ok(StepReport { loss, grad_norm })
}
