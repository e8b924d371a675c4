//! Run configuration.
//!
//! A TOML file with dotted sections (`[uvae]`, `[train]`, ...) is merged over
//! the defaults; then `section.key=value` overrides are applied. Shape fields
//! that follow from the horizon (`uvae.steps`, `uvae.patch_time`, the
//! denoiser latent grid) are derived unless set explicitly, and explicit
//! values must agree.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tfcodit_core::diffusion::{DenoiserConfig, ScheduleParams};
use tfcodit_core::optim::AdamWConfig;
use tfcodit_core::preprocess::HORIZONS;
use tfcodit_core::sampler::SamplerConfig;
use tfcodit_core::signal::Contract;
use tfcodit_core::synthetic::SyntheticCorpusSpec;
use tfcodit_core::uvae::UVaeConfig;

use crate::error::{Error, Result};
use crate::records::{read_text, write_text};

/// Environment variable consulted when `paths.data_dir` is empty.
pub const DATA_ROOT_ENV: &str = "TFCODIT_DATA_ROOT";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Empty: `$TFCODIT_DATA_ROOT`, else `data`.
    pub data_dir: String,
    /// Empty: `<data>/checkpoints`.
    pub checkpoint_dir: String,
    /// Empty: `<data>/generated`.
    pub output_dir: String,
    /// Empty: the preprocessed prompts of the current contract and horizon.
    pub prompt_dir: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub vae_lr: f64,
    pub diffusion_lr: f64,
    pub lr_schedule: LrSchedule,
    pub warmup: f64,
    pub vae_steps: usize,
    pub diffusion_steps: usize,
    pub batch: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub log_every: usize,
    /// Intermediate checkpoint period in steps; `0` saves only at the end.
    pub checkpoint_every: usize,
    pub window_stride: usize,
    /// Set the denoiser latent scale to `1 / std` of the training latents.
    pub auto_latent_scale: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            vae_lr: 1e-3,
            diffusion_lr: 5e-4,
            lr_schedule: LrSchedule::Cosine,
            warmup: 0.05,
            vae_steps: 1000,
            diffusion_steps: 2000,
            batch: 16,
            weight_decay: 0.0,
            clip_norm: 1.0,
            log_every: 10,
            checkpoint_every: 0,
            window_stride: 1,
            auto_latent_scale: true,
        }
    }
}

impl TrainConfig {
    pub fn lr(&self, base: f64, step: usize, total: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Cosine => tfcodit_core::optim::cosine_lr(base, step, total, self.warmup),
            LrSchedule::Constant => base,
        }
    }

    pub fn adamw(&self, lr: f64) -> AdamWConfig {
        AdamWConfig { lr, weight_decay: self.weight_decay, clip_norm: self.clip_norm, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    pub max_words: usize,
    pub min_count: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self { max_words: 400, min_count: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub contract: Contract,
    pub horizon: usize,
    /// Horizons prepared by `preprocess`.
    pub horizons: Vec<usize>,
    pub paths: Paths,
    pub uvae: UVaeConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleParams,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub prompts: PromptConfig,
    pub synthetic: SyntheticCorpusSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_horizon(32)
    }
}

impl RunConfig {
    pub fn for_horizon(horizon: usize) -> Self {
        let mut cfg = Self {
            seed: 0,
            contract: Contract::T,
            horizon,
            horizons: HORIZONS.to_vec(),
            paths: Paths::default(),
            uvae: UVaeConfig::for_horizon(horizon),
            denoiser: DenoiserConfig::default(),
            schedule: ScheduleParams::default(),
            sampler: SamplerConfig::default(),
            train: TrainConfig::default(),
            prompts: PromptConfig::default(),
            synthetic: SyntheticCorpusSpec { n_days: 1000, block_days: 48, ..Default::default() },
        };
        cfg.set_horizon(horizon);
        cfg
    }

    /// Moves every horizon-derived shape to `horizon`.
    pub fn set_horizon(&mut self, horizon: usize) {
        self.horizon = horizon;
        self.uvae.steps = horizon;
        self.uvae.patch_time = (horizon / 8).max(1);
        self.sync_denoiser();
    }

    /// Copies the autoencoder latent grid into the denoiser section.
    pub fn sync_denoiser(&mut self) {
        self.denoiser.n_freq = self.uvae.n_freq();
        self.denoiser.n_time = self.uvae.n_time();
        self.denoiser.latent_dim = self.uvae.token_width();
    }

    /// Cross-section shape checks plus each section's own validation.
    pub fn validate(&self) -> Result<()> {
        let mismatch = |m: String| Err(Error::ConfigShapeMismatch(m));
        if self.uvae.steps != self.horizon {
            return mismatch(format!("uvae.steps = {} but horizon = {}", self.uvae.steps, self.horizon));
        }
        self.uvae.validate().map_err(|e| Error::ConfigShapeMismatch(format!("uvae: {e}")))?;
        let want = (self.uvae.n_freq(), self.uvae.n_time(), self.uvae.token_width());
        let got = (self.denoiser.n_freq, self.denoiser.n_time, self.denoiser.latent_dim);
        if got != want {
            return mismatch(format!("denoiser latent grid (n_freq, n_time, latent_dim) = {got:?}, autoencoder gives {want:?}"));
        }
        self.denoiser.validate().map_err(|e| Error::ConfigShapeMismatch(format!("denoiser: {e}")))?;
        let schedule = tfcodit_core::diffusion::NoiseSchedule::from_params(&self.schedule).map_err(|e| Error::Config(format!("schedule: {e}")))?;
        self.sampler.validate(&schedule).map_err(|e| Error::Config(format!("sampler: {e}")))?;
        if self.train.batch == 0 || self.train.window_stride == 0 {
            return Err(Error::Config("train.batch and train.window_stride must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.train.warmup) {
            return Err(Error::Config("train.warmup must lie in [0, 1)".into()));
        }
        if self.horizons.iter().any(|&h| h == 0 || h % 8 != 0) {
            return Err(Error::Config(format!("horizons {:?} must be positive multiples of 8", self.horizons)));
        }
        Ok(())
    }

    pub fn data_root(&self) -> PathBuf {
        if !self.paths.data_dir.is_empty() {
            return PathBuf::from(&self.paths.data_dir);
        }
        match std::env::var_os(DATA_ROOT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => PathBuf::from("data"),
        }
    }

    pub fn checkpoint_root(&self) -> PathBuf {
        or_under(&self.paths.checkpoint_dir, self.data_root(), "checkpoints")
    }

    pub fn output_dir(&self) -> PathBuf {
        or_under(&self.paths.output_dir, self.data_root(), "generated")
    }

    /// `<checkpoints>/<contract>/h<L>/<kind>`.
    pub fn checkpoint_dir(&self, kind: &str) -> PathBuf {
        self.checkpoint_root().join(self.contract.as_str()).join(format!("h{}", self.horizon)).join(kind)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_toml()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_sources(Some(&read_text(path)?), &[])
    }

    /// Defaults, then `file` (TOML text), then `key=value` overrides.
    pub fn from_sources(file: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut user = match file {
            Some(text) => text.parse::<toml::Table>().map_err(|e| Error::Config(e.to_string()))?,
            None => toml::Table::new(),
        };
        for (key, value) in overrides {
            set_dotted(&mut user, key, parse_value(value))?;
        }
        let horizon = match user.get("horizon") {
            None => 32,
            Some(v) => v.as_integer().filter(|&h| h > 0).ok_or_else(|| Error::Config(format!("horizon must be a positive integer, got {v}")))? as usize,
        };
        let mut merged = toml::Table::try_from(Self::for_horizon(horizon)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, &user);
        let mut cfg: Self = toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        check_known_keys(&cfg, &user)?;
        if !has_any(&user, "denoiser", &["n_freq", "n_time", "latent_dim"]) {
            cfg.sync_denoiser();
        }
        if has_path(&user, "seed") && !has_path(&user, "sampler.seed") {
            cfg.sampler.seed = cfg.seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn or_under(explicit: &str, root: PathBuf, leaf: &str) -> PathBuf {
    if explicit.is_empty() {
        root.join(leaf)
    } else {
        PathBuf::from(explicit)
    }
}

/// TOML literal if it parses as one, else a bare string.
pub fn parse_value(text: &str) -> toml::Value {
    format!("v = {text}").parse::<toml::Table>().ok().and_then(|mut t| t.remove("v")).unwrap_or_else(|| toml::Value::String(text.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("{key}: {p} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn leaf_paths(table: &toml::Table, prefix: &str, out: &mut BTreeSet<String>) {
    for (k, v) in table {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) if !t.is_empty() => leaf_paths(t, &path, out),
            _ => {
                out.insert(path);
            }
        }
    }
}

/// Rejects user keys that the parsed config does not carry (serde silently
/// drops unknown fields of the core sections).
fn check_known_keys(cfg: &RunConfig, user: &toml::Table) -> Result<()> {
    let parsed = toml::Table::try_from(cfg).map_err(|e| Error::Config(e.to_string()))?;
    let (mut known, mut given) = (BTreeSet::new(), BTreeSet::new());
    leaf_paths(&parsed, "", &mut known);
    leaf_paths(user, "", &mut given);
    match given.iter().find(|k| !known.contains(*k)) {
        Some(k) => Err(Error::Config(format!("unknown key {k}"))),
        None => Ok(()),
    }
}

fn has_path(table: &toml::Table, key: &str) -> bool {
    let mut cur = table;
    let parts: Vec<&str> = key.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        match cur.get(*p).and_then(toml::Value::as_table) {
            Some(t) => cur = t,
            None => return false,
        }
    }
    cur.contains_key(parts[parts.len() - 1])
}

fn has_any(table: &toml::Table, section: &str, keys: &[&str]) -> bool {
    keys.iter().any(|k| has_path(table, &format!("{section}.{k}")))
}
