//! Stratified normalization of daily market records, sliding windows and the
//! train/test split.
//!
//! | channels                          | transform                               |
//! |-----------------------------------|-----------------------------------------|
//! | open, high, low, close, settle    | `(x_t - open_{t-1}) / open_{t-1} * 100` |
//! | value, volume                     | `log10(x_t + 1)`                        |
//! | open interest                     | `(x_t - x_{t-1}) / x_{t-1}`             |
//!
//! The first record of a contiguous sequence only supplies anchors.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{Contract, TimeSeries, CHANNELS, OPEN, OPEN_INTEREST, VALUE, VOLUME};
use crate::tensor::Matrix;

/// Days held out at the end of every contract for testing.
pub const TEST_DAYS: usize = 200;

/// Generation horizons evaluated by default.
pub const HORIZONS: [usize; 4] = [8, 32, 64, 128];

/// Window sizes used to train the autoencoder.
pub const VAE_WINDOW_SIZES: [usize; 7] = [4, 8, 16, 32, 64, 96, 128];

const PRICE_CHANNELS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDailyRecord {
    pub date: String,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub settle: f64,
    /// Turnover, millions CNY.
    pub value: f64,
    pub volume: f64,
    pub open_interest: f64,
}

impl RawDailyRecord {
    pub fn channels(&self) -> [f64; CHANNELS] {
        [self.open, self.high, self.low, self.close, self.settle, self.value, self.volume, self.open_interest]
    }

    pub fn from_channels(date: String, c: [f64; CHANNELS]) -> Self {
        Self { date, open: c[0], high: c[1], low: c[2], close: c[3], settle: c[4], value: c[5], volume: c[6], open_interest: c[7] }
    }

    /// Checks positivity and the `low ≤ open, close ≤ high` envelope.
    pub fn check(&self) -> core::result::Result<(), String> {
        let prices = [self.open, self.high, self.low, self.close, self.settle];
        if prices.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(format!("{}: prices must be positive", self.date));
        }
        if !(self.low <= self.open.min(self.close) && self.open.max(self.close) <= self.high) {
            return Err(format!("{}: low/open/close/high envelope violated", self.date));
        }
        if [self.value, self.volume, self.open_interest].iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(format!("{}: activity fields must be non-negative", self.date));
        }
        Ok(())
    }
}

/// Anchors needed to invert the normalization.
///
/// Entry `t` holds the previous-day values for normalized step `t`. Inversion
/// only consumes entry 0 and chains forward, so a state carrying just the
/// last observed day can denormalize a generated continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationState {
    /// Date of every normalized step (may be shorter than the series).
    pub dates: Vec<String>,
    pub open_anchors: Vec<f64>,
    pub oi_anchors: Vec<f64>,
}

impl NormalizationState {
    /// State for a continuation after a day with the given open and open interest.
    pub fn from_anchor(open: f64, open_interest: f64) -> Result<Self> {
        if !(open > 0.0) || !(open_interest > 0.0) {
            return Err(Error::NonPositiveAnchor { index: 0 });
        }
        Ok(Self { dates: Vec::new(), open_anchors: alloc::vec![open], oi_anchors: alloc::vec![open_interest] })
    }

    /// Anchors for the window starting at `start`.
    pub fn window(&self, start: usize, len: usize) -> Self {
        let clip = |v: &[f64]| v.get(start..(start + len).min(v.len())).map(<[f64]>::to_vec).unwrap_or_default();
        Self {
            dates: self.dates.get(start..(start + len).min(self.dates.len())).map(<[String]>::to_vec).unwrap_or_default(),
            open_anchors: clip(&self.open_anchors),
            oi_anchors: clip(&self.oi_anchors),
        }
    }
}

/// Normalizes a contiguous record sequence. The output has one step fewer
/// than the input.
pub fn normalize(records: &[RawDailyRecord], contract: Contract) -> Result<(TimeSeries, NormalizationState)> {
    if records.len() < 2 {
        return Err(Error::TooShort { needed: 2, got: records.len() });
    }
    let steps = records.len() - 1;
    let mut values = Matrix::zeros(CHANNELS, steps);
    let mut state = NormalizationState { dates: Vec::with_capacity(steps), open_anchors: Vec::with_capacity(steps), oi_anchors: Vec::with_capacity(steps) };
    for (t, pair) in records.windows(2).enumerate() {
        let (prev, cur) = (&pair[0], &pair[1]);
        if !(prev.open > 0.0) || !(prev.open_interest > 0.0) {
            return Err(Error::NonPositiveAnchor { index: t });
        }
        let raw = cur.channels();
        for c in 0..PRICE_CHANNELS {
            values.set(c, t, (raw[c] - prev.open) / prev.open * 100.0);
        }
        values.set(VALUE, t, libm::log10(cur.value + 1.0));
        values.set(VOLUME, t, libm::log10(cur.volume + 1.0));
        values.set(OPEN_INTEREST, t, (cur.open_interest - prev.open_interest) / prev.open_interest);
        state.dates.push(cur.date.clone());
        state.open_anchors.push(prev.open);
        state.oi_anchors.push(prev.open_interest);
    }
    Ok((TimeSeries::new(values, contract, true)?, state))
}

/// Inverts [`normalize`], chaining anchors forward from the first entry of
/// `state`. Dates come from `state.dates` where available, else are empty.
pub fn denormalize(series: &TimeSeries, state: &NormalizationState) -> Result<Vec<RawDailyRecord>> {
    if !series.normalized {
        return Err(Error::InvalidConfig("denormalize expects a normalized series".into()));
    }
    let (Some(&open0), Some(&oi0)) = (state.open_anchors.first(), state.oi_anchors.first()) else {
        return Err(Error::MissingAnchor);
    };
    let v = series.values();
    let mut prev_open = open0;
    let mut prev_oi = oi0;
    let mut out = Vec::with_capacity(series.steps());
    for t in 0..series.steps() {
        let mut c = [0.0; CHANNELS];
        for (ch, slot) in c.iter_mut().enumerate().take(PRICE_CHANNELS) {
            *slot = prev_open * (1.0 + v.get(ch, t) / 100.0);
        }
        c[VALUE] = libm::pow(10.0, v.get(VALUE, t)) - 1.0;
        c[VOLUME] = libm::pow(10.0, v.get(VOLUME, t)) - 1.0;
        c[OPEN_INTEREST] = prev_oi * (1.0 + v.get(OPEN_INTEREST, t));
        prev_open = c[OPEN];
        prev_oi = c[OPEN_INTEREST];
        let date = state.dates.get(t).cloned().unwrap_or_default();
        out.push(RawDailyRecord::from_channels(date, c));
    }
    Ok(out)
}

/// A horizon-length slice of a normalized series paired with its prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSample {
    pub series: TimeSeries,
    pub start: usize,
    pub start_date: String,
    pub prompt_ref: String,
}

/// Identifier of the prompt describing `[start_date, start_date + horizon)`.
pub fn prompt_ref(contract: Contract, horizon: usize, start_date: &str) -> String {
    format!("{contract}/h{horizon}/{start_date}")
}

/// All windows of length `horizon` at the given stride; `dates[t]` labels step `t`.
pub fn make_windows(series: &TimeSeries, dates: &[String], horizon: usize, stride: usize) -> Result<Vec<WindowedSample>> {
    let len = series.steps();
    if horizon == 0 || horizon > len {
        return Err(Error::HorizonTooLong { horizon, len });
    }
    let stride = stride.max(1);
    Ok((0..=len - horizon)
        .step_by(stride)
        .map(|start| {
            let start_date = dates.get(start).cloned().unwrap_or_else(|| format!("{start}"));
            WindowedSample { series: series.window(start, horizon), start, prompt_ref: prompt_ref(series.contract, horizon, &start_date), start_date }
        })
        .collect())
}

/// Index ranges of the train part and the final [`TEST_DAYS`] test part.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Range<usize>,
    pub test: Range<usize>,
}

impl Split {
    /// Window start indices lying entirely inside one part, stride 1.
    pub fn window_starts(&self, horizon: usize) -> (Vec<usize>, Vec<usize>) {
        (starts_within(&self.train, horizon), starts_within(&self.test, horizon))
    }
}

fn starts_within(r: &Range<usize>, horizon: usize) -> Vec<usize> {
    if horizon == 0 || r.len() < horizon {
        return Vec::new();
    }
    (r.start..=r.end - horizon).collect()
}

pub fn split_train_test(len: usize) -> Result<Split> {
    if len <= TEST_DAYS {
        return Err(Error::TooShort { needed: TEST_DAYS + 1, got: len });
    }
    Ok(Split { train: 0..len - TEST_DAYS, test: len - TEST_DAYS..len })
}

/// Splits a series into its train and test parts.
pub fn split_series(series: &TimeSeries) -> Result<(TimeSeries, TimeSeries)> {
    let s = split_train_test(series.steps())?;
    Ok((series.window(s.train.start, s.train.len()), series.window(s.test.start, s.test.len())))
}
