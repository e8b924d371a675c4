//! Files, training loops, generation and evaluation around `tfcodit-core`.
//!
//! Data root layout:
//!
//! ```text
//! raw/<C>.csv                       daily records
//! raw/<C>_finmap.json               daily FinMAP documents
//! raw/<C>_regimes.csv               regime labels (synthetic corpora)
//! processed/<C>/normalized.csv      normalized series
//! processed/<C>/state.json          normalization anchors
//! processed/<C>/split.json          train and test index ranges
//! processed/<C>/h<L>/windows.json   window table
//! processed/<C>/h<L>/prompts.json   one periodic prompt per window
//! processed/<C>/h<L>/prompts/       test prompts, one file per window
//! processed/<C>/h<L>/truth/         test windows at stride L
//! checkpoints/<C>/h<L>/{uvae,diffusion}/
//! ```

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod documents;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod records;
pub mod trainer;

pub use config::RunConfig;
pub use error::{Error, Result};
