//! Multi-channel series and their aligned multilevel Haar wavelet grids.
//!
//! A channel of length `T` decomposed to level `J` yields the approximation
//! `a_J` (length `T/2^J`) and details `d_J .. d_1` (length `T/2^j`). Each
//! coefficient row is stretched to width `T` by repeating every element, so
//! a channel becomes a rectangular `(J+1) × T` map:
//!
//! ```text
//! row 0   a_J      each value repeated 2^J times
//! row 1   d_J      2^J
//! row 2   d_{J-1}  2^(J-1)
//! ...
//! row J   d_1      2
//! ```
//!
//! Inversion collapses each row back with block means (a projection when the
//! repetition structure is not respected, e.g. for model output) and runs the
//! synthesis filter bank.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const CHANNELS: usize = 8;

pub const CHANNEL_NAMES: [&str; CHANNELS] = ["open", "high", "low", "close", "settle", "value", "volume", "open_interest"];

pub const OPEN: usize = 0;
pub const HIGH: usize = 1;
pub const LOW: usize = 2;
pub const CLOSE: usize = 3;
pub const SETTLE: usize = 4;
pub const VALUE: usize = 5;
pub const VOLUME: usize = 6;
pub const OPEN_INTEREST: usize = 7;

/// Treasury futures contract by tenor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Contract {
    /// 2-year
    TS,
    /// 5-year
    TF,
    /// 10-year
    T,
    /// 30-year
    TL,
}

impl Contract {
    pub const ALL: [Contract; 4] = [Contract::TS, Contract::TF, Contract::T, Contract::TL];

    pub fn as_str(self) -> &'static str {
        match self {
            Contract::TS => "TS",
            Contract::TF => "TF",
            Contract::T => "T",
            Contract::TL => "TL",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str().eq_ignore_ascii_case(s))
    }
}

impl core::fmt::Display for Contract {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Eight-channel daily market record sequence, channels × steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    values: Matrix,
    pub contract: Contract,
    pub normalized: bool,
}

impl TimeSeries {
    pub fn new(values: Matrix, contract: Contract, normalized: bool) -> Result<Self> {
        if values.rows() != CHANNELS {
            return Err(Error::ShapeMismatch(format!("expected {CHANNELS} channels, got {}", values.rows())));
        }
        if values.cols() == 0 {
            return Err(Error::TooShort { needed: 1, got: 0 });
        }
        check_finite(&values)?;
        Ok(Self { values, contract, normalized })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }

    pub fn steps(&self) -> usize {
        self.values.cols()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        self.values.row(c)
    }

    pub fn channel_names(&self) -> [&'static str; CHANNELS] {
        CHANNEL_NAMES
    }

    /// Steps `[start, start + len)` as a new series.
    pub fn window(&self, start: usize, len: usize) -> Self {
        Self { values: self.values.slice_cols(start, len), contract: self.contract, normalized: self.normalized }
    }
}

fn check_finite(m: &Matrix) -> Result<()> {
    for c in 0..m.rows() {
        if let Some(step) = m.row(c).iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteInput { channel: c, step });
        }
    }
    Ok(())
}

/// Orthonormal Haar filter bank applied `level` times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompositionConfig {
    pub level: usize,
}

const INV_SQRT2: f64 = core::f64::consts::FRAC_1_SQRT_2;

impl DecompositionConfig {
    pub const LOW_PASS: [f64; 2] = [INV_SQRT2, INV_SQRT2];
    pub const HIGH_PASS: [f64; 2] = [INV_SQRT2, -INV_SQRT2];

    pub fn new(level: usize) -> Self {
        Self { level }
    }

    /// Number of grid rows, `J + 1`.
    pub fn scales(&self) -> usize {
        self.level + 1
    }

    pub fn validate_for(&self, len: usize) -> Result<()> {
        if self.level == 0 || self.level >= usize::BITS as usize || (1usize << self.level) > len {
            return Err(Error::InvalidLevel { level: self.level, len });
        }
        if len % (1usize << self.level) != 0 {
            return Err(Error::LengthNotDivisible { len, level: self.level });
        }
        Ok(())
    }

    /// Repeat factor per grid row: `2^J` for `a_J` and `d_J`, then halving
    /// down to `2` for `d_1`.
    pub fn row_scales(&self) -> Vec<usize> {
        let j = self.level;
        let mut out = vec![1usize << j];
        out.extend((1..=j).rev().map(|lvl| 1usize << lvl));
        out
    }
}

/// `C × (J+1) × T` coefficient tensor, stored channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveletGrid {
    channels: usize,
    level: usize,
    steps: usize,
    data: Vec<f64>,
}

impl WaveletGrid {
    pub fn zeros(channels: usize, level: usize, steps: usize) -> Self {
        Self { channels, level, steps, data: vec![0.0; channels * (level + 1) * steps] }
    }

    /// Builds a grid from one `(J+1) × T` matrix per channel.
    pub fn from_channel_maps(maps: &[Matrix], level: usize) -> Result<Self> {
        let Some(first) = maps.first() else {
            return Err(Error::ShapeMismatch("no channels".into()));
        };
        let steps = first.cols();
        let mut data = Vec::with_capacity(maps.len() * (level + 1) * steps);
        for m in maps {
            if m.shape() != (level + 1, steps) {
                return Err(Error::ShapeMismatch(format!("channel map is {:?}, expected ({}, {steps})", m.shape(), level + 1)));
            }
            data.extend_from_slice(m.as_slice());
        }
        Ok(Self { channels: maps.len(), level, steps, data })
    }

    /// Reinterprets a `(C·(J+1)) × T` matrix.
    pub fn from_stacked(m: &Matrix, channels: usize, level: usize) -> Result<Self> {
        if m.rows() != channels * (level + 1) {
            return Err(Error::ShapeMismatch(format!("{} rows cannot hold {channels}×{}", m.rows(), level + 1)));
        }
        Ok(Self { channels, level, steps: m.cols(), data: m.as_slice().to_vec() })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn level(&self) -> usize {
        self.level
    }

    /// `Γ = J + 1`.
    pub fn scales(&self) -> usize {
        self.level + 1
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.level + 1, self.steps)
    }

    pub fn row_scales(&self) -> Vec<usize> {
        DecompositionConfig::new(self.level).row_scales()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, channel: usize, row: usize, step: usize) -> f64 {
        self.data[(channel * (self.level + 1) + row) * self.steps + step]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, row: usize, step: usize, v: f64) {
        let idx = (channel * (self.level + 1) + row) * self.steps + step;
        self.data[idx] = v;
    }

    pub fn row(&self, channel: usize, row: usize) -> &[f64] {
        let start = (channel * (self.level + 1) + row) * self.steps;
        &self.data[start..start + self.steps]
    }

    /// One channel's `(J+1) × T` map.
    pub fn channel_map(&self, channel: usize) -> Matrix {
        let n = (self.level + 1) * self.steps;
        Matrix::from_vec(self.level + 1, self.steps, self.data[channel * n..(channel + 1) * n].to_vec())
    }

    /// All channels stacked vertically, `(C·(J+1)) × T`.
    pub fn to_stacked(&self) -> Matrix {
        Matrix::from_vec(self.channels * (self.level + 1), self.steps, self.data.clone())
    }

    /// Native-length coefficient rows of one channel, `[a_J, d_J, ..., d_1]`,
    /// each recovered by block-averaging its repetition runs.
    pub fn native_rows(&self, channel: usize) -> Vec<Vec<f64>> {
        self.row_scales().iter().enumerate().map(|(r, &scale)| collapse(self.row(channel, r), scale)).collect()
    }

    pub fn max_abs_diff_grid(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape(), "grid shapes differ");
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()))
    }

    /// Grid with every repetition run replaced by its mean.
    pub fn projected(&self) -> Self {
        let mut out = self.clone();
        let scales = self.row_scales();
        for c in 0..self.channels {
            for (r, &scale) in scales.iter().enumerate() {
                let native = collapse(self.row(c, r), scale);
                for t in 0..self.steps {
                    out.set(c, r, t, native[t / scale]);
                }
            }
        }
        out
    }
}

fn collapse(row: &[f64], scale: usize) -> Vec<f64> {
    row.chunks(scale).map(|run| run.iter().sum::<f64>() / scale as f64).collect()
}

fn analysis_step(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let [l0, l1] = DecompositionConfig::LOW_PASS;
    let [h0, h1] = DecompositionConfig::HIGH_PASS;
    x.chunks_exact(2).map(|p| (l0 * p[0] + l1 * p[1], h0 * p[0] + h1 * p[1])).unzip()
}

fn synthesis_step(approx: &[f64], detail: &[f64]) -> Vec<f64> {
    let [l0, l1] = DecompositionConfig::LOW_PASS;
    let [h0, h1] = DecompositionConfig::HIGH_PASS;
    let mut out = Vec::with_capacity(approx.len() * 2);
    for (&a, &d) in approx.iter().zip(detail) {
        out.push(l0 * a + h0 * d);
        out.push(l1 * a + h1 * d);
    }
    out
}

/// Native (unexpanded) coefficients of one channel: `[a_J, d_J, ..., d_1]`.
pub fn haar_analysis(x: &[f64], level: usize) -> Vec<Vec<f64>> {
    let mut approx = x.to_vec();
    let mut details = Vec::with_capacity(level);
    for _ in 0..level {
        let (a, d) = analysis_step(&approx);
        details.push(d);
        approx = a;
    }
    let mut rows = vec![approx];
    rows.extend(details.into_iter().rev());
    rows
}

/// Inverse of [`haar_analysis`].
pub fn haar_synthesis(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut approx = rows[0].clone();
    for detail in &rows[1..] {
        approx = synthesis_step(&approx, detail);
    }
    approx
}

/// Aligned multilevel Haar decomposition of every channel.
pub fn dwt_decompose(series: &TimeSeries, cfg: &DecompositionConfig) -> Result<WaveletGrid> {
    let values = series.values();
    check_finite(values)?;
    let steps = values.cols();
    cfg.validate_for(steps)?;
    let scales = cfg.row_scales();
    let mut grid = WaveletGrid::zeros(values.rows(), cfg.level, steps);
    for c in 0..values.rows() {
        let rows = haar_analysis(values.row(c), cfg.level);
        for (r, (coeffs, &scale)) in rows.iter().zip(&scales).enumerate() {
            debug_assert_eq!(coeffs.len() * scale, steps);
            for t in 0..steps {
                grid.set(c, r, t, coeffs[t / scale]);
            }
        }
    }
    Ok(grid)
}

/// Collapses each grid row by block means and inverts the filter bank.
pub fn idwt_reconstruct(grid: &WaveletGrid, cfg: &DecompositionConfig) -> Result<Matrix> {
    if grid.level() != cfg.level {
        return Err(Error::ShapeMismatch(format!("grid has {} scales, config expects {}", grid.scales(), cfg.scales())));
    }
    cfg.validate_for(grid.steps()).map_err(|_| Error::ShapeMismatch(format!("grid width {} incompatible with level {}", grid.steps(), cfg.level)))?;
    let mut out = Matrix::zeros(grid.channels(), grid.steps());
    for c in 0..grid.channels() {
        let x = haar_synthesis(&grid.native_rows(c));
        out.row_mut(c).copy_from_slice(&x);
    }
    Ok(out)
}

/// [`idwt_reconstruct`] wrapped back into an eight-channel series.
pub fn idwt_series(grid: &WaveletGrid, cfg: &DecompositionConfig, contract: Contract, normalized: bool) -> Result<TimeSeries> {
    TimeSeries::new(idwt_reconstruct(grid, cfg)?, contract, normalized)
}
