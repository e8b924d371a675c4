//! Reverse-time sampling and the generation pipeline
//! (latent → wavelet grid → normalized series → prices).

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diffusion::{condition_tokens, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::preprocess::{denormalize, NormalizationState, RawDailyRecord};
use crate::signal::{idwt_series, Contract, DecompositionConfig, TimeSeries, WaveletGrid};
use crate::tensor::Matrix;
use crate::uvae::UVae;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMethod {
    /// Posterior mean plus `σ_t` noise; the last step is noise-free.
    AncestralDdpm,
    /// Deterministic first-order update, identical to DDIM with `η = 0`.
    SolverFirstOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub method: SamplerMethod,
    pub num_steps: usize,
    pub seed: u64,
    /// `ε = ε_c + w (ε_c − ε_u)`; `0` is the plain conditional prediction.
    pub guidance_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { method: SamplerMethod::SolverFirstOrder, num_steps: 50, seed: 0, guidance_scale: 0.0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.num_steps == 0 || self.num_steps > schedule.steps() {
            return Err(Error::InvalidConfig(format!("num_steps must lie in 1..={}", schedule.steps())));
        }
        if !(self.guidance_scale >= 0.0) {
            return Err(Error::InvalidConfig("guidance_scale must be non-negative".into()));
        }
        Ok(())
    }
}

/// Visited timesteps, strictly decreasing from `T` and ending at `0`.
pub fn timesteps(total: usize, num_steps: usize) -> Vec<usize> {
    let mut ts: Vec<usize> = (0..=num_steps).rev().map(|i| (i * total + num_steps / 2) / num_steps).collect();
    ts.dedup();
    ts
}

/// Anything that predicts the noise in `z_t`.
pub trait NoisePredictor {
    /// `z` is `M × d_c`; an empty `condition` is the null condition.
    fn predict(&self, z: &Matrix, t: usize, condition: &[u32]) -> Result<Matrix>;
}

/// A denoiser bound to its parameters.
pub struct BoundDenoiser<'a> {
    pub model: &'a Denoiser,
    pub store: &'a ParamStore,
}

impl NoisePredictor for BoundDenoiser<'_> {
    fn predict(&self, z: &Matrix, t: usize, condition: &[u32]) -> Result<Matrix> {
        if self.store.is_empty() {
            return Err(Error::UntrainedParams);
        }
        self.model.predict(self.store, z, t, &condition_tokens(condition, false))
    }
}

fn guided<P: NoisePredictor + ?Sized>(p: &P, z: &Matrix, t: usize, condition: &[u32], w: f64) -> Result<Matrix> {
    let eps_c = p.predict(z, t, condition)?;
    if w == 0.0 {
        return Ok(eps_c);
    }
    let eps_u = p.predict(z, t, &[])?;
    Ok(eps_c.zip_map(&eps_u, |c, u| c + w * (c - u)))
}

/// Runs the reverse process from `z_T ~ N(0, I)` drawn with `rng`.
pub fn sample_latent_with<P: NoisePredictor + ?Sized, R: rand::Rng + ?Sized>(
    predictor: &P,
    condition: &[u32],
    shape: (usize, usize),
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Matrix> {
    cfg.validate(schedule)?;
    let mut z = crate::rng::standard_normal(rng, shape.0, shape.1);
    let ts = timesteps(schedule.steps(), cfg.num_steps);
    for pair in ts.windows(2) {
        let (t, prev) = (pair[0], pair[1]);
        let eps = guided(predictor, &z, t, condition, cfg.guidance_scale)?;
        let ab = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(prev);
        let (sa, s1a) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
        let x0 = z.zip_map(&eps, |zi, ei| (zi - s1a * ei) / sa);
        z = match cfg.method {
            SamplerMethod::SolverFirstOrder => {
                let (a, b) = (libm::sqrt(ab_prev), libm::sqrt(1.0 - ab_prev));
                x0.zip_map(&eps, |x, e| a * x + b * e)
            }
            SamplerMethod::AncestralDdpm => {
                let ratio = ab / ab_prev;
                let c0 = libm::sqrt(ab_prev) * (1.0 - ratio) / (1.0 - ab);
                let c1 = libm::sqrt(ratio) * (1.0 - ab_prev) / (1.0 - ab);
                let mut mean = x0.zip_map(&z, |x, zi| c0 * x + c1 * zi);
                if prev > 0 {
                    let var = (1.0 - ab_prev) / (1.0 - ab) * (1.0 - ratio);
                    let noise = crate::rng::standard_normal(rng, shape.0, shape.1);
                    let sd = libm::sqrt(var);
                    mean = mean.zip_map(&noise, |m, n| m + sd * n);
                }
                mean
            }
        };
    }
    Ok(z)
}

/// Trajectory `k` of a sampling call draws from stream `(seed, k)`.
pub fn sample_latent<P: NoisePredictor + ?Sized>(
    predictor: &P,
    condition: &[u32],
    shape: (usize, usize),
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    trajectory: u64,
) -> Result<Matrix> {
    let mut rng = crate::rng::stream(cfg.seed, trajectory);
    sample_latent_with(predictor, condition, shape, cfg, schedule, &mut rng)
}

/// Output of one generated trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Latent `z0` in encoder units, `d` long.
    pub latent: Vec<f64>,
    pub grid: WaveletGrid,
    pub normalized: TimeSeries,
    pub raw: TimeSeries,
    pub records: Vec<RawDailyRecord>,
}

/// Decodes an encoder-space latent into a grid, a normalized series and
/// price records anchored at `state`.
pub fn realize(vae: &UVae, vae_store: &ParamStore, latent: &[f64], contract: Contract, state: &NormalizationState) -> Result<Generation> {
    let grid = vae.decode(vae_store, latent)?;
    let cfg = vae.config();
    let normalized = idwt_series(&grid, &DecompositionConfig::new(cfg.level), contract, true)?;
    let records = denormalize(&normalized, state)?;
    let raw_values = Matrix::from_fn(crate::signal::CHANNELS, records.len(), |c, t| records[t].channels()[c]);
    let raw = TimeSeries::new(raw_values, contract, false)?;
    Ok(Generation { latent: latent.to_vec(), grid, normalized, raw, records })
}

/// Everything generation needs besides the condition.
pub struct Pipeline<'a> {
    pub vae: &'a UVae,
    pub vae_store: &'a ParamStore,
    pub denoiser: &'a Denoiser,
    pub denoiser_store: &'a ParamStore,
    pub schedule: &'a NoiseSchedule,
}

impl Pipeline<'_> {
    pub fn check(&self) -> Result<()> {
        let v = self.vae.config();
        let d = self.denoiser.config();
        if (v.n_freq(), v.n_time(), v.token_width()) != (d.n_freq, d.n_time, d.latent_dim) {
            return Err(Error::ShapeMismatch(format!(
                "autoencoder latent grid {}x{}x{} differs from denoiser {}x{}x{}",
                v.n_freq(),
                v.n_time(),
                v.token_width(),
                d.n_freq,
                d.n_time,
                d.latent_dim
            )));
        }
        if self.vae_store.is_empty() || self.denoiser_store.is_empty() {
            return Err(Error::UntrainedParams);
        }
        Ok(())
    }

    /// Samples trajectory `k`, rescales the latent to encoder units and
    /// realizes it.
    pub fn generate(
        &self,
        condition: &[u32],
        horizon: usize,
        cfg: &SamplerConfig,
        contract: Contract,
        state: &NormalizationState,
        trajectory: u64,
    ) -> Result<Generation> {
        self.check()?;
        if horizon != self.vae.config().steps {
            return Err(Error::ShapeMismatch(format!("horizon {horizon}, autoencoder built for {}", self.vae.config().steps)));
        }
        if state.open_anchors.is_empty() || state.oi_anchors.is_empty() {
            return Err(Error::MissingAnchor);
        }
        let d = self.denoiser.config();
        let predictor = BoundDenoiser { model: self.denoiser, store: self.denoiser_store };
        let z = sample_latent(&predictor, condition, (d.latent_tokens(), d.latent_dim), cfg, self.schedule, trajectory)?;
        let latent: Vec<f64> = z.as_slice().iter().map(|x| x / d.latent_scale).collect();
        realize(self.vae, self.vae_store, &latent, contract, state)
    }
}
