//! Generation from a pair of checkpoints, with per-trajectory output files.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use tfcodit_core::diffusion::{Denoiser, DenoiserConfig, NoiseSchedule, ScheduleParams};
use tfcodit_core::finmap::{FinMapDocument, Vocabulary};
use tfcodit_core::params::ParamStore;
use tfcodit_core::preprocess::NormalizationState;
use tfcodit_core::sampler::{Generation, Pipeline, SamplerConfig};
use tfcodit_core::signal::Contract;
use tfcodit_core::uvae::{UVae, UVaeConfig};

use crate::dataset::{self, window_stem, Layout, Part};
use crate::error::{Error, Result};
use crate::records::{write_records, write_series, write_text};
use crate::trainer::{load_diffusion, load_vae, DiffusionRecord, VaeRecord};

/// Both trained models.
pub struct Models {
    pub vae: UVae,
    pub vae_store: ParamStore,
    pub vae_record: VaeRecord,
    pub denoiser: Denoiser,
    pub denoiser_store: ParamStore,
    pub schedule: NoiseSchedule,
    pub vocab: Vocabulary,
    pub record: DiffusionRecord,
}

impl Models {
    pub fn load(vae_dir: &Path, diffusion_dir: &Path) -> Result<Self> {
        let (vae, vae_store, vae_record) = load_vae(vae_dir)?;
        let (denoiser, denoiser_store, schedule, vocab, record) = load_diffusion(diffusion_dir)?;
        if (vae_record.contract, vae_record.horizon) != (record.contract, record.horizon) {
            return Err(Error::ConfigShapeMismatch(format!(
                "autoencoder is for {} h{}, denoiser for {} h{}",
                vae_record.contract, vae_record.horizon, record.contract, record.horizon
            )));
        }
        let models = Self { vae, vae_store, vae_record, denoiser, denoiser_store, schedule, vocab, record };
        models.pipeline().check()?;
        Ok(models)
    }

    pub fn pipeline(&self) -> Pipeline<'_> {
        Pipeline { vae: &self.vae, vae_store: &self.vae_store, denoiser: &self.denoiser, denoiser_store: &self.denoiser_store, schedule: &self.schedule }
    }

    pub fn horizon(&self) -> usize {
        self.record.horizon
    }

    pub fn contract(&self) -> Contract {
        self.record.contract
    }

    pub fn tokens(&self, condition: &Condition) -> Vec<u32> {
        match condition {
            Condition::Prompt(doc) => self.vocab.tokenize(doc, self.record.denoiser.max_text),
            Condition::Null => Vec::new(),
        }
    }

    pub fn generate(&self, condition: &Condition, sampler: &SamplerConfig, state: &NormalizationState, trajectory: u64) -> Result<Generation> {
        let tokens = self.tokens(condition);
        Ok(self.pipeline().generate(&tokens, self.horizon(), sampler, self.contract(), state, trajectory)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    Prompt(FinMapDocument),
    Null,
}

impl Condition {
    /// SHA-256 of the prompt's JSON form, or of `null`.
    pub fn sha256(&self) -> String {
        let text = match self {
            Condition::Prompt(doc) => serde_json::to_string(doc).unwrap_or_default(),
            Condition::Null => "null".into(),
        };
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    fn kind(&self) -> &'static str {
        match self {
            Condition::Prompt(_) => "prompt",
            Condition::Null => "null",
        }
    }
}

#[derive(Debug, Serialize)]
struct Sidecar<'a> {
    condition: &'static str,
    condition_sha256: String,
    seed: u64,
    trajectory: u64,
    contract: Contract,
    horizon: usize,
    records: String,
    normalized: String,
    sampler: &'a SamplerConfig,
    schedule: &'a ScheduleParams,
    uvae: &'a UVaeConfig,
    denoiser: &'a DenoiserConfig,
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Writes `k` trajectories as `<stem>_kNN.csv` (prices),
/// `<stem>_kNN.normalized.csv` and `<stem>_kNN.json` (sidecar). Returns the
/// normalized paths.
pub fn write_trajectories(
    models: &Models,
    condition: &Condition,
    sampler: &SamplerConfig,
    state: &NormalizationState,
    k: usize,
    out_dir: &Path,
    stem: &str,
) -> Result<Vec<PathBuf>> {
    let mut out = Vec::with_capacity(k);
    for j in 0..k {
        let g = models.generate(condition, sampler, state, j as u64)?;
        let name = format!("{stem}_k{j:02}");
        let raw = out_dir.join(format!("{name}.csv"));
        let norm = out_dir.join(format!("{name}.normalized.csv"));
        write_records(&raw, &g.records)?;
        let dates: Vec<String> = g.records.iter().map(|r| r.date.clone()).collect();
        write_series(&norm, &g.normalized, &dates)?;
        let sidecar = Sidecar {
            condition: condition.kind(),
            condition_sha256: condition.sha256(),
            seed: sampler.seed,
            trajectory: j as u64,
            contract: models.contract(),
            horizon: models.horizon(),
            records: file_name(&raw),
            normalized: file_name(&norm),
            sampler,
            schedule: &models.record.schedule,
            uvae: models.vae.config(),
            denoiser: &models.record.denoiser,
        };
        let path = out_dir.join(format!("{name}.json"));
        let text = serde_json::to_string_pretty(&sidecar).map_err(crate::error::json_err(&path))?;
        write_text(&path, &(text + "\n"))?;
        out.push(norm);
    }
    Ok(out)
}

/// Generates `k` trajectories for every test window of the models' contract
/// and horizon, prompted by the window's own prompt (or the null condition).
/// Returns the number of windows.
pub fn generate_test_windows(models: &Models, layout: &Layout, sampler: &SamplerConfig, k: usize, null: bool, out_dir: &Path) -> Result<usize> {
    let (c, h) = (models.contract(), models.horizon());
    let processed = dataset::load_processed(layout, c)?;
    let data = dataset::load_horizon(layout, c, h)?;
    let mut n = 0;
    for w in data.windows.iter().filter(|w| w.part == Part::Test) {
        let condition =
            if null { Condition::Null } else { Condition::Prompt(dataset::read_prompt(&layout.prompt_dir(c, h).join(format!("{}.json", w.start_date)))?) };
        let state = processed.state.window(w.start, h);
        write_trajectories(models, &condition, sampler, &state, k, out_dir, &window_stem(c, h, &w.start_date))?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::MissingData(format!("no test windows for {c} h{h}")));
    }
    Ok(n)
}
