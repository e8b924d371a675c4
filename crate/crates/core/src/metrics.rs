//! Scores for generated series: OHLC MSE/MAE and multi-trajectory error bands.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{TimeSeries, CHANNELS, CHANNEL_NAMES, CLOSE};

/// Channels in the headline metrics: open, high, low, close.
pub const OHLC: [usize; 4] = [0, 1, 2, 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelScore {
    pub mse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    /// Averaged over OHLC channels and all steps.
    pub mse: f64,
    pub mae: f64,
    pub per_channel: Vec<(String, ChannelScore)>,
}

fn check_shapes(pred: &TimeSeries, truth: &TimeSeries) -> Result<()> {
    if pred.values().shape() != truth.values().shape() {
        return Err(Error::ShapeMismatch(format!("prediction {:?} vs truth {:?}", pred.values().shape(), truth.values().shape())));
    }
    Ok(())
}

pub fn score(pred: &TimeSeries, truth: &TimeSeries) -> Result<Score> {
    check_shapes(pred, truth)?;
    let per_channel: Vec<(String, ChannelScore)> = (0..CHANNELS)
        .map(|c| {
            let (p, t) = (pred.channel(c), truth.channel(c));
            let n = p.len() as f64;
            let mse = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
            let mae = p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
            (String::from(CHANNEL_NAMES[c]), ChannelScore { mse, mae })
        })
        .collect();
    let k = OHLC.len() as f64;
    let mse = OHLC.iter().map(|&c| per_channel[c].1.mse).sum::<f64>() / k;
    let mae = OHLC.iter().map(|&c| per_channel[c].1.mae).sum::<f64>() / k;
    Ok(Score { mse, mae, per_channel })
}

/// Per-step envelope of the close channel over several trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBand {
    pub truth: Vec<f64>,
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// `Σ_k Σ_t |pred_k(t) − truth(t)|`.
    pub cumulative_error: f64,
    pub trajectories: usize,
}

impl ErrorBand {
    pub fn width(&self, t: usize) -> f64 {
        self.max[t] - self.min[t]
    }

    /// `step,truth,mean,min,max` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,truth,mean,min,max\n");
        for t in 0..self.truth.len() {
            s.push_str(&format!("{t},{},{},{},{}\n", self.truth[t], self.mean[t], self.min[t], self.max[t]));
        }
        s
    }
}

pub fn error_band(trajectories: &[TimeSeries], truth: &TimeSeries) -> Result<ErrorBand> {
    if trajectories.len() < 2 {
        return Err(Error::ShapeMismatch(format!("error band needs at least 2 trajectories, got {}", trajectories.len())));
    }
    for p in trajectories {
        check_shapes(p, truth)?;
    }
    let tr = truth.channel(CLOSE).to_vec();
    let steps = tr.len();
    let k = trajectories.len() as f64;
    let mut mean = alloc::vec![0.0; steps];
    let mut min = alloc::vec![f64::INFINITY; steps];
    let mut max = alloc::vec![f64::NEG_INFINITY; steps];
    let mut cumulative_error = 0.0;
    for p in trajectories {
        for (t, &x) in p.channel(CLOSE).iter().enumerate() {
            mean[t] += x / k;
            min[t] = min[t].min(x);
            max[t] = max[t].max(x);
            cumulative_error += (x - tr[t]).abs();
        }
    }
    Ok(ErrorBand { truth: tr, mean, min, max, cumulative_error, trajectories: trajectories.len() })
}

/// One `(contract, horizon)` cell of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub contract: String,
    pub horizon: usize,
    pub n_samples: usize,
    pub mse: f64,
    pub mae: f64,
    pub per_channel: Vec<(String, ChannelScore)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    /// Averages per-sample scores into one row.
    pub fn add(&mut self, contract: &str, horizon: usize, scores: &[Score]) -> Result<()> {
        if scores.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = scores.len() as f64;
        let per_channel = (0..CHANNELS)
            .map(|c| {
                let mse = scores.iter().map(|s| s.per_channel[c].1.mse).sum::<f64>() / n;
                let mae = scores.iter().map(|s| s.per_channel[c].1.mae).sum::<f64>() / n;
                (String::from(CHANNEL_NAMES[c]), ChannelScore { mse, mae })
            })
            .collect();
        self.rows.push(ReportRow {
            contract: contract.into(),
            horizon,
            n_samples: scores.len(),
            mse: scores.iter().map(|s| s.mse).sum::<f64>() / n,
            mae: scores.iter().map(|s| s.mae).sum::<f64>() / n,
            per_channel,
        });
        self.rows.sort_by(|a, b| (a.contract.as_str(), a.horizon).cmp(&(b.contract.as_str(), b.horizon)));
        Ok(())
    }

    /// Aligned text table, one line per row: contract, horizon, n, MSE, MAE.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<8} {:>7} {:>6} {:>12} {:>12}\n", "contract", "horizon", "n", "mse", "mae");
        for r in &self.rows {
            s.push_str(&format!("{:<8} {:>7} {:>6} {:>12.6} {:>12.6}\n", r.contract, r.horizon, r.n_samples, r.mse, r.mae));
        }
        s
    }
}
