//! AdamW with a warmup + cosine learning-rate schedule.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, clip_norm: 1.0 }
    }
}

/// Learning rate at `step` (0-based) of `total` steps: linear warmup over the
/// first `warmup_fraction` of training, then half-cosine decay to zero.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup_fraction: f64) -> f64 {
    let total = total.max(1);
    let warmup = libm::ceil(warmup_fraction * total as f64) as usize;
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    base * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
}

/// First and second moment estimates, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamWState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store.iter().map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols())).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn quantize_f32(&mut self) {
        for m in self.m.iter_mut().chain(self.v.iter_mut()) {
            for x in m.as_mut_slice() {
                *x = *x as f32 as f64;
            }
        }
    }
}

/// One optimizer update over the trainable parameters that received
/// gradients. Returns the pre-clip global gradient norm.
pub fn adamw_step(store: &mut ParamStore, state: &mut AdamWState, grads: &[(ParamId, Matrix)], cfg: &AdamWConfig, lr: f64) -> f64 {
    let norm = libm::sqrt(grads.iter().map(|(_, g)| g.as_slice().iter().map(|x| x * x).sum::<f64>()).sum::<f64>());
    let clip = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    for (id, g) in grads {
        if !store.get(*id).trainable {
            continue;
        }
        let m = state.m[id.0].as_mut_slice();
        let v = state.v[id.0].as_mut_slice();
        let w = store.value_mut(*id).as_mut_slice();
        for (((wi, mi), vi), &gi) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.as_slice()) {
            let gi = gi * clip;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *wi -= lr * (mhat / (libm::sqrt(vhat) + cfg.eps) + cfg.weight_decay * *wi);
        }
    }
    norm
}
