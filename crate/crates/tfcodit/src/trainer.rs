//! Training loops with checkpointing and resume.
//!
//! Step `s` draws its batch and noise from the stream `(seed, tag, s)`, and
//! parameters and moments stay on the f32 grid, so a run resumed from a
//! checkpoint continues exactly as the uninterrupted run would.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use tfcodit_core::diffusion::{Denoiser, DenoiserConfig, DiffusionExample, NoiseSchedule, ScheduleParams};
use tfcodit_core::finmap::{FinMapDocument, Vocabulary};
use tfcodit_core::optim::AdamWState;
use tfcodit_core::params::ParamStore;
use tfcodit_core::rng::{stream, substream};
use tfcodit_core::signal::{Contract, WaveletGrid};
use tfcodit_core::tensor::Matrix;
use tfcodit_core::train::{diffusion_step, vae_step, StepStats};
use tfcodit_core::uvae::{UVae, UVaeConfig};

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::dataset::{read_json, write_json};
use crate::documents::{read_vocabulary, write_vocabulary};
use crate::error::{csv_err, io_err, Error, Result};

pub const VAE_KIND: &str = "uvae";
pub const DIFFUSION_KIND: &str = "diffusion";

const TAG_VAE_INIT: u64 = 1;
const TAG_VAE_STEP: u64 = 2;
const TAG_DIFF_INIT: u64 = 3;
const TAG_DIFF_STEP: u64 = 4;

/// Config echo of an autoencoder checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeRecord {
    pub contract: Contract,
    pub horizon: usize,
    pub seed: u64,
    pub steps: usize,
    pub uvae: UVaeConfig,
}

/// Config echo of a denoiser checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionRecord {
    pub contract: Contract,
    pub horizon: usize,
    pub seed: u64,
    pub steps: usize,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

impl LogRow {
    fn new(step: usize, lr: f64, s: StepStats) -> Self {
        Self { step, loss: s.loss, recon: s.recon, kl: s.kl, lr, grad_norm: s.grad_norm }
    }
}

/// How far to run and whether to continue from the checkpoint in the
/// output directory.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunControl {
    pub resume: bool,
    /// Stop (and checkpoint) before this step, e.g. to split a run in two.
    pub stop_at: Option<usize>,
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(csv_err(path))?;
    rd.deserialize().map(|r| r.map_err(csv_err(path))).collect()
}

fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Log rows of earlier steps, kept when resuming.
fn earlier_rows(dir: &Path, before: usize) -> Result<Vec<LogRow>> {
    let path = dir.join("log.csv");
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(read_log(&path)?.into_iter().filter(|r| r.step < before).collect())
}

fn batch_indices<R: Rng>(rng: &mut R, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

pub fn load_vae(dir: &Path) -> Result<(UVae, ParamStore, VaeRecord)> {
    let ck = checkpoint::load_kind(dir, VAE_KIND)?;
    let rec: VaeRecord = ck.manifest.config_as(dir)?;
    let (model, store) = UVae::bind(rec.uvae.clone(), &ck.params)?;
    Ok((model, store, rec))
}

fn resume_state(ck: &Checkpoint, store: &ParamStore, dir: &Path) -> Result<AdamWState> {
    if !ck.has_optimizer_state() {
        return Err(Error::Checkpoint { path: dir.to_path_buf(), reason: "no optimizer state to resume from".into() });
    }
    ck.optimizer_state(store)
}

/// Trains the autoencoder on `grids` and writes `dir`. Returns the log of
/// this invocation.
pub fn train_vae(cfg: &RunConfig, grids: &[WaveletGrid], dir: &Path, ctl: RunControl, progress: &mut dyn FnMut(&LogRow)) -> Result<Vec<LogRow>> {
    if grids.is_empty() {
        return Err(Error::MissingData("no training windows".into()));
    }
    let total = cfg.train.vae_steps;
    let (model, mut store, mut state, rec) = if ctl.resume {
        let ck = checkpoint::load_kind(dir, VAE_KIND)?;
        let rec: VaeRecord = ck.manifest.config_as(dir)?;
        let (model, store) = UVae::bind(rec.uvae.clone(), &ck.params)?;
        let state = resume_state(&ck, &store, dir)?;
        (model, store, state, rec)
    } else {
        let rec = VaeRecord { contract: cfg.contract, horizon: cfg.horizon, seed: cfg.seed, steps: total, uvae: cfg.uvae.clone() };
        let mut store = ParamStore::new();
        let model = UVae::new(rec.uvae.clone(), &mut store, &mut stream(cfg.seed, TAG_VAE_INIT))?;
        let refs: Vec<&WaveletGrid> = grids.iter().collect();
        model.fit_grid_scaler(&mut store, &refs)?;
        store.quantize_f32();
        let state = AdamWState::new(&store);
        (model, store, state, rec)
    };
    let start = state.step as usize;
    let end = ctl.stop_at.map_or(total, |s| s.min(total));
    let mut log = if ctl.resume { earlier_rows(dir, start)? } else { Vec::new() };
    let first_new = log.len();
    for s in start..end {
        let mut rng = substream(rec.seed, TAG_VAE_STEP, s as u64);
        let batch: Vec<&WaveletGrid> = batch_indices(&mut rng, grids.len(), cfg.train.batch).into_iter().map(|i| &grids[i]).collect();
        let lr = cfg.train.lr(cfg.train.vae_lr, s, total);
        let stats = vae_step(&model, &mut store, &mut state, &batch, &cfg.train.adamw(lr), lr, &mut rng)?;
        let row = LogRow::new(s, lr, stats);
        progress(&row);
        log.push(row);
        if cfg.train.checkpoint_every > 0 && (s + 1) % cfg.train.checkpoint_every == 0 && s + 1 < end {
            checkpoint::save(dir, VAE_KIND, &rec, &store, Some(&state))?;
            write_log(&dir.join("log.csv"), &log)?;
        }
    }
    checkpoint::save(dir, VAE_KIND, &rec, &store, Some(&state))?;
    write_log(&dir.join("log.csv"), &log)?;
    Ok(log.split_off(first_new))
}

/// Paired training data for the denoiser.
#[derive(Debug, Clone, Copy)]
pub struct DiffusionData<'a> {
    pub grids: &'a [WaveletGrid],
    pub prompts: &'a [FinMapDocument],
}

/// Encoder means of `grids`, each `d` long.
pub fn latent_means(model: &UVae, store: &ParamStore, grids: &[WaveletGrid]) -> Result<Vec<Vec<f64>>> {
    grids.iter().map(|g| Ok(model.encode(store, g, None)?.mean)).collect()
}

/// `1 / std` over all latent entries, or 1 when they do not vary.
pub fn latent_scale(latents: &[Vec<f64>]) -> f64 {
    let n = latents.iter().map(Vec::len).sum::<usize>() as f64;
    let mean = latents.iter().flatten().sum::<f64>() / n;
    let var = latents.iter().flatten().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    if var > 1e-24 {
        1.0 / var.sqrt()
    } else {
        1.0
    }
}

/// Trains the denoiser on latents of the autoencoder in `vae_dir`.
pub fn train_diffusion(
    cfg: &RunConfig,
    vae_dir: &Path,
    data: DiffusionData<'_>,
    dir: &Path,
    ctl: RunControl,
    progress: &mut dyn FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    if data.grids.is_empty() || data.grids.len() != data.prompts.len() {
        return Err(Error::MissingData(format!("{} windows with {} prompts", data.grids.len(), data.prompts.len())));
    }
    let (vae, vae_store, vae_rec) = load_vae(vae_dir)?;
    if vae_rec.horizon != cfg.horizon {
        return Err(Error::ConfigShapeMismatch(format!("autoencoder checkpoint is for horizon {}, run uses {}", vae_rec.horizon, cfg.horizon)));
    }
    let latents = latent_means(&vae, &vae_store, data.grids)?;
    let total = cfg.train.diffusion_steps;
    let (model, mut store, mut state, rec, vocab) = if ctl.resume {
        let ck = checkpoint::load_kind(dir, DIFFUSION_KIND)?;
        let rec: DiffusionRecord = ck.manifest.config_as(dir)?;
        let vocab = read_vocabulary(&dir.join("vocab.txt"))?;
        let (model, mut store) = Denoiser::bind(rec.denoiser.clone(), &ck.params)?;
        if rec.denoiser.freeze_body {
            model.freeze_body(&mut store);
        }
        let state = resume_state(&ck, &store, dir)?;
        (model, store, state, rec, vocab)
    } else {
        let vocab = Vocabulary::build(data.prompts, cfg.prompts.max_words, cfg.prompts.min_count);
        let uv = vae.config();
        let denoiser = DenoiserConfig {
            vocab_size: vocab.len(),
            latent_scale: if cfg.train.auto_latent_scale { latent_scale(&latents) } else { cfg.denoiser.latent_scale },
            n_freq: uv.n_freq(),
            n_time: uv.n_time(),
            latent_dim: uv.token_width(),
            ..cfg.denoiser.clone()
        };
        if (denoiser.n_freq, denoiser.n_time, denoiser.latent_dim) != (cfg.denoiser.n_freq, cfg.denoiser.n_time, cfg.denoiser.latent_dim) {
            return Err(Error::ConfigShapeMismatch("denoiser latent grid differs from the autoencoder checkpoint".into()));
        }
        let rec = DiffusionRecord { contract: cfg.contract, horizon: cfg.horizon, seed: cfg.seed, steps: total, denoiser, schedule: cfg.schedule };
        let mut store = ParamStore::new();
        let model = Denoiser::new(rec.denoiser.clone(), &mut store, &mut stream(cfg.seed, TAG_DIFF_INIT))?;
        if rec.denoiser.freeze_body {
            model.freeze_body(&mut store);
        }
        store.quantize_f32();
        let state = AdamWState::new(&store);
        (model, store, state, rec, vocab)
    };
    let schedule = NoiseSchedule::from_params(&rec.schedule)?;
    let d = &rec.denoiser;
    let examples: Vec<DiffusionExample> = latents
        .iter()
        .zip(data.prompts)
        .map(|(z, p)| DiffusionExample {
            z0: Matrix::from_vec(d.latent_tokens(), d.latent_dim, z.iter().map(|x| x * d.latent_scale).collect()),
            condition: vocab.tokenize(p, d.max_text),
        })
        .collect();

    let start = state.step as usize;
    let end = ctl.stop_at.map_or(total, |s| s.min(total));
    let mut log = if ctl.resume { earlier_rows(dir, start)? } else { Vec::new() };
    let first_new = log.len();
    let save = |store: &ParamStore, state: &AdamWState, log: &[LogRow]| -> Result<()> {
        checkpoint::save(dir, DIFFUSION_KIND, &rec, store, Some(state))?;
        write_json(&dir.join("schedule.json"), &rec.schedule)?;
        write_vocabulary(&dir.join("vocab.txt"), &vocab)?;
        write_log(&dir.join("log.csv"), log)
    };
    for s in start..end {
        let mut rng = substream(rec.seed, TAG_DIFF_STEP, s as u64);
        let batch: Vec<DiffusionExample> = batch_indices(&mut rng, examples.len(), cfg.train.batch).into_iter().map(|i| examples[i].clone()).collect();
        let lr = cfg.train.lr(cfg.train.diffusion_lr, s, total);
        let stats = diffusion_step(&model, &mut store, &mut state, &batch, &schedule, &cfg.train.adamw(lr), lr, &mut rng)?;
        let row = LogRow::new(s, lr, stats);
        progress(&row);
        log.push(row);
        if cfg.train.checkpoint_every > 0 && (s + 1) % cfg.train.checkpoint_every == 0 && s + 1 < end {
            save(&store, &state, &log)?;
        }
    }
    save(&store, &state, &log)?;
    Ok(log.split_off(first_new))
}

/// Denoiser, its store, schedule and vocabulary from a checkpoint.
pub fn load_diffusion(dir: &Path) -> Result<(Denoiser, ParamStore, NoiseSchedule, Vocabulary, DiffusionRecord)> {
    let ck = checkpoint::load_kind(dir, DIFFUSION_KIND)?;
    let rec: DiffusionRecord = ck.manifest.config_as(dir)?;
    let (model, store) = Denoiser::bind(rec.denoiser.clone(), &ck.params)?;
    let params: ScheduleParams = read_json(&dir.join("schedule.json"))?;
    if params != rec.schedule {
        return Err(Error::Checkpoint { path: dir.to_path_buf(), reason: "schedule.json disagrees with the manifest".into() });
    }
    let schedule = NoiseSchedule::from_params(&params)?;
    let vocab = read_vocabulary(&dir.join("vocab.txt"))?;
    if vocab.len() != rec.denoiser.vocab_size {
        return Err(Error::Checkpoint {
            path: dir.to_path_buf(),
            reason: format!("vocab.txt has {} tokens, model expects {}", vocab.len(), rec.denoiser.vocab_size),
        });
    }
    Ok((model, store, schedule, vocab, rec))
}
