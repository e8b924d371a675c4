//! Scoring generated trajectories against truth windows.
//!
//! Truth files are `<C>_h<L>_<date>.csv`; predictions are
//! `<C>_h<L>_<date>_kNN.normalized.csv`. Both hold normalized series.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tfcodit_core::metrics::{error_band, score, EvalReport};
use tfcodit_core::signal::{Contract, TimeSeries};

use crate::dataset::{parse_stem, write_json};
use crate::error::{io_err, Error, Result};
use crate::records::{read_series, write_text};

const PRED_SUFFIX: &str = ".normalized.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSummary {
    pub window: String,
    pub trajectories: usize,
    pub cumulative_error: f64,
    pub mean_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: EvalReport,
    pub bands: Vec<BandSummary>,
}

fn list(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        if entry.file_type().map_err(io_err(dir))?.is_file() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

/// `window stem -> trajectory files`, keyed over the truth stems.
fn match_files(pred_dir: &Path, truth_dir: &Path) -> Result<BTreeMap<String, Vec<PathBuf>>> {
    let mut matched: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    for name in list(truth_dir)? {
        if let Some(stem) = name.strip_suffix(".csv") {
            if parse_stem(stem).is_some() {
                matched.insert(stem.to_string(), Vec::new());
            }
        }
    }
    let mut orphans = Vec::new();
    for name in list(pred_dir)? {
        let Some(traj) = name.strip_suffix(PRED_SUFFIX) else { continue };
        let window = traj.rsplit_once("_k").map(|(w, _)| w).unwrap_or(traj);
        match matched.get_mut(window) {
            Some(v) => v.push(pred_dir.join(&name)),
            None => orphans.push(name),
        }
    }
    let missing: Vec<&String> = matched.iter().filter(|(_, v)| v.is_empty()).map(|(k, _)| k).collect();
    if !orphans.is_empty() || !missing.is_empty() || matched.is_empty() {
        let mut msg = Vec::new();
        if matched.is_empty() {
            msg.push(format!("no truth files in {}", truth_dir.display()));
        }
        if !orphans.is_empty() {
            msg.push(format!("predictions without truth: {}", orphans.join(", ")));
        }
        if !missing.is_empty() {
            msg.push(format!("truth without predictions: {}", missing.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")));
        }
        return Err(Error::UnmatchedFiles(msg.join("; ")));
    }
    Ok(matched)
}

/// Scores every matched pair, one report row per (contract, horizon), and
/// an error band per window with at least two trajectories.
pub fn evaluate(pred_dir: &Path, truth_dir: &Path) -> Result<(Evaluation, BTreeMap<String, String>)> {
    let matched = match_files(pred_dir, truth_dir)?;
    let mut scores: BTreeMap<(Contract, usize), Vec<_>> = BTreeMap::new();
    let mut bands = Vec::new();
    let mut band_csv = BTreeMap::new();
    for (stem, preds) in &matched {
        let (contract, horizon, _) = parse_stem(stem).ok_or_else(|| Error::UnmatchedFiles(format!("bad truth name {stem}")))?;
        let (truth, _) = read_series(&truth_dir.join(format!("{stem}.csv")), contract)?;
        let trajs: Vec<TimeSeries> = preds.iter().map(|p| Ok(read_series(p, contract)?.0)).collect::<Result<_>>()?;
        for t in &trajs {
            scores.entry((contract, horizon)).or_default().push(score(t, &truth)?);
        }
        if trajs.len() >= 2 {
            let band = error_band(&trajs, &truth)?;
            let steps = band.mean.len();
            bands.push(BandSummary {
                window: stem.clone(),
                trajectories: band.trajectories,
                cumulative_error: band.cumulative_error,
                mean_width: (0..steps).map(|t| band.width(t)).sum::<f64>() / steps as f64,
            });
            band_csv.insert(stem.clone(), band.to_csv());
        }
    }
    let mut report = EvalReport::default();
    for ((c, h), s) in &scores {
        report.add(c.as_str(), *h, s)?;
    }
    Ok((Evaluation { report, bands }, band_csv))
}

/// Writes `report.json`, `report.txt` and `bands/<window>.csv`.
pub fn write_evaluation(out_dir: &Path, eval: &Evaluation, band_csv: &BTreeMap<String, String>) -> Result<()> {
    write_json(&out_dir.join("report.json"), eval)?;
    write_text(&out_dir.join("report.txt"), &eval.report.to_table())?;
    for (stem, csv) in band_csv {
        write_text(&out_dir.join("bands").join(format!("{stem}.csv")), csv)?;
    }
    Ok(())
}
