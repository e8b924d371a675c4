//! Single optimizer steps for the autoencoder and the denoiser.
//!
//! Parameters and optimizer moments are rounded to `f32` after every update,
//! so a float32 checkpoint taken between steps resumes bit-identically.

use alloc::vec::Vec;

use rand::Rng;

use crate::diffusion::{diffusion_loss, Denoiser, DiffusionExample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::params::{Graph, ParamStore};
use crate::signal::WaveletGrid;
use crate::uvae::{ElboTerms, UVae};

/// Loss terms and gradient norm of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub grad_norm: f64,
}

fn finish(store: &mut ParamStore, state: &mut AdamWState) {
    store.quantize_f32();
    state.quantize_f32();
}

/// One ELBO step over `batch`, averaging the per-grid objectives.
pub fn vae_step<R: Rng + ?Sized>(
    model: &UVae,
    store: &mut ParamStore,
    state: &mut AdamWState,
    batch: &[&WaveletGrid],
    opt: &AdamWConfig,
    lr: f64,
    rng: &mut R,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let width = model.config().width;
    let (grads, terms) = {
        let mut g = Graph::new(store);
        let mut losses = Vec::with_capacity(batch.len());
        let mut acc = ElboTerms { total: 0.0, recon: 0.0, kl: 0.0 };
        for grid in batch {
            let eps = crate::rng::standard_normal(rng, 1, width);
            let (l, t) = model.loss_graph(&mut g, grid, &eps)?;
            losses.push(l);
            acc.total += t.total;
            acc.recon += t.recon;
            acc.kl += t.kl;
        }
        let n = batch.len() as f64;
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = g.tape.add(total, l);
        }
        let total = g.tape.scale(total, 1.0 / n);
        (g.tape.backward(total).param_grads(), ElboTerms { total: acc.total / n, recon: acc.recon / n, kl: acc.kl / n })
    };
    let grad_norm = adamw_step(store, state, &grads, opt, lr);
    finish(store, state);
    Ok(StepStats { loss: terms.total, recon: terms.recon, kl: terms.kl, grad_norm })
}

/// One ε-prediction step.
pub fn diffusion_step<R: Rng + ?Sized>(
    model: &Denoiser,
    store: &mut ParamStore,
    state: &mut AdamWState,
    batch: &[DiffusionExample],
    schedule: &NoiseSchedule,
    opt: &AdamWConfig,
    lr: f64,
    rng: &mut R,
) -> Result<StepStats> {
    let (grads, loss) = {
        let mut g = Graph::new(store);
        let loss = diffusion_loss(&mut g, model, batch, schedule, rng)?;
        let value = g.value(loss).get(0, 0);
        (g.tape.backward(loss).param_grads(), value)
    };
    let grad_norm = adamw_step(store, state, &grads, opt, lr);
    finish(store, state);
    Ok(StepStats { loss, recon: loss, kl: 0.0, grad_norm })
}

/// Mean absolute reconstruction error of `decode(μ(x))` over all grid entries.
pub fn reconstruction_error(model: &UVae, store: &ParamStore, grids: &[&WaveletGrid]) -> Result<f64> {
    if grids.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for g in grids {
        let z = model.encode(store, g, None)?;
        let r = model.decode(store, &z.sample)?;
        total += g.as_slice().iter().zip(r.as_slice()).map(|(a, b)| (a - b).abs()).sum::<f64>();
        count += g.as_slice().len();
    }
    Ok(total / count as f64)
}
