//! Subcommand bodies shared by the binary and the tests.

use std::path::{Path, PathBuf};

use tfcodit_core::finmap::FinMapDocument;
use tfcodit_core::preprocess::{denormalize, normalize, NormalizationState};
use tfcodit_core::signal::{dwt_decompose, idwt_reconstruct, Contract, DecompositionConfig};
use tfcodit_core::synthetic::{business_days, generate};

use crate::config::RunConfig;
use crate::dataset::{self, Layout};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, write_evaluation, Evaluation};
use crate::generation::{generate_test_windows, write_trajectories, Condition, Models};
use crate::records::read_records;
use crate::trainer::{self, DiffusionData, LogRow, RunControl};

pub fn layout(cfg: &RunConfig) -> Layout {
    Layout::new(cfg.data_root())
}

/// Writes a synthetic corpus for the configured contract.
pub fn gen_synthetic(cfg: &RunConfig) -> Result<PathBuf> {
    let spec = &cfg.synthetic;
    spec.validate().map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let corpus = generate(spec).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let layout = layout(cfg);
    let labels: Vec<String> = spec.regimes.iter().map(|r| r.label.clone()).collect();
    dataset::write_corpus(&layout, cfg.contract, &corpus, &labels)?;
    Ok(layout.raw_records(cfg.contract))
}

/// Preprocesses `contract`, or every contract with raw data.
pub fn preprocess(cfg: &RunConfig, contract: Option<Contract>) -> Result<Vec<dataset::Summary>> {
    let layout = layout(cfg);
    let contracts = match contract {
        Some(c) => vec![c],
        None => layout.contracts(),
    };
    if contracts.is_empty() {
        return Err(Error::MissingData(format!("no raw record files in {}", layout.raw_dir().display())));
    }
    contracts.into_iter().map(|c| dataset::preprocess(&layout, c, &cfg.horizons)).collect()
}

fn training_set(cfg: &RunConfig) -> Result<(dataset::Processed, dataset::HorizonData, Vec<usize>)> {
    let layout = layout(cfg);
    let p = dataset::load_processed(&layout, cfg.contract)?;
    let h = dataset::load_horizon(&layout, cfg.contract, cfg.horizon)?;
    let idx = h.train_indices(cfg.train.window_stride);
    if idx.is_empty() {
        return Err(Error::MissingData(format!("no training windows for {} h{}", cfg.contract, cfg.horizon)));
    }
    Ok((p, h, idx))
}

pub fn train_vae(cfg: &RunConfig, ctl: RunControl, progress: &mut dyn FnMut(&LogRow)) -> Result<PathBuf> {
    let (p, h, idx) = training_set(cfg)?;
    let grids = dataset::grids(&p, &h, &idx, cfg.uvae.level)?;
    let dir = cfg.checkpoint_dir(trainer::VAE_KIND);
    trainer::train_vae(cfg, &grids, &dir, ctl, progress)?;
    Ok(dir)
}

pub fn train_diffusion(cfg: &RunConfig, ctl: RunControl, progress: &mut dyn FnMut(&LogRow)) -> Result<PathBuf> {
    let (p, h, idx) = training_set(cfg)?;
    let all = h.prompts.as_ref().ok_or_else(|| {
        Error::MissingData(format!("no prompts for {} h{}; add raw/{}_finmap.json and rerun preprocess", cfg.contract, cfg.horizon, cfg.contract))
    })?;
    let prompts: Vec<FinMapDocument> = idx.iter().map(|&i| all[i].clone()).collect();
    let grids = dataset::grids(&p, &h, &idx, cfg.uvae.level)?;
    let dir = cfg.checkpoint_dir(trainer::DIFFUSION_KIND);
    trainer::train_diffusion(cfg, &cfg.checkpoint_dir(trainer::VAE_KIND), DiffusionData { grids: &grids, prompts: &prompts }, &dir, ctl, progress)?;
    Ok(dir)
}

pub fn load_models(cfg: &RunConfig) -> Result<Models> {
    Models::load(&cfg.checkpoint_dir(trainer::VAE_KIND), &cfg.checkpoint_dir(trainer::DIFFUSION_KIND))
}

/// Where generation anchors come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Anchors {
    /// A saved normalization state (JSON), e.g. a window of `state.json`.
    State(PathBuf),
    /// Previous-day open and open interest, with an optional first date.
    Values { open: f64, open_interest: f64, start_date: Option<String> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateRequest {
    pub prompt: Option<PathBuf>,
    pub anchors: Option<Anchors>,
    pub trajectories: usize,
    pub out_dir: Option<PathBuf>,
    pub name: Option<String>,
    /// Generate for every test window instead of one prompt.
    pub test_windows: bool,
    pub null: bool,
}

fn anchor_state(a: &Anchors, horizon: usize) -> Result<NormalizationState> {
    match a {
        Anchors::State(p) => dataset::read_json(p),
        Anchors::Values { open, open_interest, start_date } => {
            let mut s = NormalizationState::from_anchor(*open, *open_interest)?;
            if let Some(d) = start_date {
                s.dates = business_days(d, horizon)?;
            }
            Ok(s)
        }
    }
}

/// Returns the output directory.
pub fn generate_cmd(cfg: &RunConfig, req: &GenerateRequest) -> Result<PathBuf> {
    let models = load_models(cfg)?;
    if (models.contract(), models.horizon()) != (cfg.contract, cfg.horizon) {
        return Err(Error::ConfigShapeMismatch("checkpoint contract or horizon differs from the run".into()));
    }
    let out = req.out_dir.clone().unwrap_or_else(|| cfg.output_dir());
    if req.trajectories == 0 {
        return Err(Error::Config("at least one trajectory is required".into()));
    }
    if req.test_windows {
        generate_test_windows(&models, &layout(cfg), &cfg.sampler, req.trajectories, req.null, &out)?;
        return Ok(out);
    }
    let condition = match (&req.prompt, req.null) {
        (_, true) => Condition::Null,
        (Some(p), false) => Condition::Prompt(dataset::read_prompt(p)?),
        (None, false) => return Err(Error::Config("generate needs --prompt, --null or --test-windows".into())),
    };
    let state = match &req.anchors {
        Some(a) => anchor_state(a, cfg.horizon)?,
        None => {
            // continue from the last observed day of the contract
            let records = read_records(&layout(cfg).raw_records(cfg.contract))?;
            let last = records.last().ok_or_else(|| Error::MissingData("empty record file".into()))?;
            NormalizationState::from_anchor(last.open, last.open_interest)?
        }
    };
    let stem = req.name.clone().unwrap_or_else(|| match &req.prompt {
        Some(p) => p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "generated".into()),
        None => "null".into(),
    });
    write_trajectories(&models, &condition, &cfg.sampler, &state, req.trajectories, &out, &stem)?;
    Ok(out)
}

pub fn evaluate_cmd(pred_dir: &Path, truth_dir: &Path, out_dir: &Path) -> Result<Evaluation> {
    let (eval, bands) = evaluate(pred_dir, truth_dir)?;
    write_evaluation(out_dir, &eval, &bands)?;
    Ok(eval)
}

/// Outcome of the invariant checks on one contract.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrip {
    pub contract: Contract,
    pub records: usize,
    pub max_rel_norm_error: f64,
    pub windows: usize,
    pub max_wavelet_error: f64,
    pub max_energy_rel_error: f64,
}

impl RoundTrip {
    pub fn passed(&self) -> bool {
        self.max_rel_norm_error < 1e-9 && self.max_wavelet_error < 1e-9 && self.max_energy_rel_error < 1e-9
    }
}

/// Normalization and wavelet round trips over every contract's raw records.
pub fn roundtrip_check(cfg: &RunConfig) -> Result<Vec<RoundTrip>> {
    let layout = layout(cfg);
    let contracts = layout.contracts();
    if contracts.is_empty() {
        return Err(Error::MissingData(format!("no raw record files in {}", layout.raw_dir().display())));
    }
    let dcfg = DecompositionConfig::new(cfg.uvae.level);
    let mut out = Vec::new();
    for c in contracts {
        let records = read_records(&layout.raw_records(c))?;
        let (series, state) = normalize(&records, c)?;
        let back = denormalize(&series, &state)?;
        let mut rel: f64 = 0.0;
        for (a, b) in records[1..].iter().zip(&back) {
            for (x, y) in a.channels().iter().zip(b.channels()) {
                rel = rel.max((x - y).abs() / x.abs().max(1.0));
            }
        }
        let h = cfg.horizon;
        let (mut wav, mut energy, mut windows): (f64, f64, usize) = (0.0, 0.0, 0);
        for start in (0..series.steps().saturating_sub(h - 1)).step_by(h) {
            let w = series.window(start, h);
            let grid = dwt_decompose(&w, &dcfg)?;
            let rec = idwt_reconstruct(&grid, &dcfg)?;
            wav = wav.max(rec.max_abs_diff(w.values()));
            for ch in 0..w.values().rows() {
                let e_time: f64 = w.channel(ch).iter().map(|x| x * x).sum();
                let e_wave: f64 = grid.native_rows(ch).iter().flatten().map(|x| x * x).sum();
                energy = energy.max((e_time - e_wave).abs() / e_time.max(1e-300));
            }
            windows += 1;
        }
        out.push(RoundTrip { contract: c, records: records.len(), max_rel_norm_error: rel, windows, max_wavelet_error: wav, max_energy_rel_error: energy });
    }
    Ok(out)
}
