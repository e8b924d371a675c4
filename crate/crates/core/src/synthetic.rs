//! Regime-switching synthetic futures corpus with matching daily descriptions.
//!
//! Prices follow a drifting, weakly mean-reverting walk around 100 that is
//! reflected into `[90, 110]`. Each regime block carries its own drift,
//! volatility and volume level, and every day gets a daily FinMAP document
//! whose sentiment and driving-factor fields name the regime.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finmap::{FinMapDocument, Level, Span};
use crate::preprocess::RawDailyRecord;

pub const PRICE_FLOOR: f64 = 90.0;
pub const PRICE_CEIL: f64 = 110.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub label: String,
    /// Expected close-to-close change per day.
    pub drift: f64,
    /// Daily standard deviation of the close.
    pub volatility: f64,
    /// Typical traded contracts per day.
    pub volume_level: f64,
    /// Word used as the day's sentiment.
    pub sentiment: String,
    /// Phrase used as the day's driving factor.
    pub theme: String,
}

impl Regime {
    pub fn up() -> Self {
        Self { label: "up".into(), drift: 0.05, volatility: 0.08, volume_level: 40_000.0, sentiment: "bullish".into(), theme: "easing liquidity rally".into() }
    }

    pub fn down() -> Self {
        Self {
            label: "down".into(),
            drift: -0.05,
            volatility: 0.08,
            volume_level: 30_000.0,
            sentiment: "bearish".into(),
            theme: "supply pressure selloff".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub n_days: usize,
    pub regimes: Vec<Regime>,
    /// Days per regime block; blocks cycle through `regimes`.
    pub block_days: usize,
    /// Strength of the pull back towards 100.
    pub mean_reversion: f64,
    pub start_date: String,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            n_days: 600,
            regimes: alloc::vec![Regime::up(), Regime::down()],
            block_days: 40,
            mean_reversion: 0.002,
            start_date: "2020-01-02".into(),
            seed: 7,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_days < 2 || self.regimes.is_empty() || self.block_days == 0 {
            return Err(Error::InvalidConfig("synthetic corpus needs n_days >= 2, a regime and block_days > 0".into()));
        }
        if self.regimes.iter().any(|r| !(r.volatility >= 0.0) || !(r.volume_level > 1.0) || !r.drift.is_finite()) {
            return Err(Error::InvalidConfig("regime volatility must be >= 0 and volume_level > 1".into()));
        }
        if !(0.0..1.0).contains(&self.mean_reversion) {
            return Err(Error::InvalidConfig("mean_reversion must lie in [0, 1)".into()));
        }
        parse_date(&self.start_date)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub records: Vec<RawDailyRecord>,
    /// Regime index of every day.
    pub regimes: Vec<usize>,
    /// One daily document per day, spanning to the next trading day.
    pub documents: Vec<FinMapDocument>,
}

fn reflect(mut x: f64) -> f64 {
    for _ in 0..8 {
        if x > PRICE_CEIL {
            x = 2.0 * PRICE_CEIL - x;
        } else if x < PRICE_FLOOR {
            x = 2.0 * PRICE_FLOOR - x;
        } else {
            break;
        }
    }
    x.clamp(PRICE_FLOOR, PRICE_CEIL)
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Rounds to 3 decimals, the exchange tick resolution used here.
fn tick(x: f64) -> f64 {
    libm::round(x * 1000.0) / 1000.0
}

pub fn generate(spec: &SyntheticCorpusSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = crate::rng::stream(spec.seed, 0xC0);
    let dates = business_days(&spec.start_date, spec.n_days + 1)?;
    let mut records = Vec::with_capacity(spec.n_days);
    let mut regimes = Vec::with_capacity(spec.n_days);
    let mut close = 100.0;
    let mut oi: f64 = 150_000.0;
    for day in 0..spec.n_days {
        let k = (day / spec.block_days) % spec.regimes.len();
        let r = &spec.regimes[k];
        let open = reflect(close + 0.2 * r.volatility * normal(&mut rng));
        let step = r.drift + spec.mean_reversion * (100.0 - open) + r.volatility * normal(&mut rng);
        let c = reflect(open + step);
        let spread = 0.5 * r.volatility;
        let high = tick((open.max(c) + spread * libm::fabs(normal(&mut rng))).min(PRICE_CEIL));
        let low = tick((open.min(c) - spread * libm::fabs(normal(&mut rng))).max(PRICE_FLOOR));
        let (open, c) = (tick(open), tick(c));
        let settle = tick((c + 0.1 * r.volatility * normal(&mut rng)).clamp(low, high));
        let volume = libm::round(r.volume_level * libm::exp(0.2 * normal(&mut rng)));
        let value = libm::round(volume * c * 100.0);
        oi = libm::round((oi * (1.0 + 0.01 * normal(&mut rng))).max(1_000.0));
        let rec = RawDailyRecord { date: dates[day].clone(), open, high, low, close: c, settle, value, volume, open_interest: oi };
        rec.check().map_err(Error::InvalidConfig)?;
        records.push(rec);
        regimes.push(k);
        close = c;
    }
    let documents = records.iter().zip(&regimes).enumerate().map(|(i, (rec, &k))| daily_document(rec, &dates[i + 1], &spec.regimes[k])).collect();
    Ok(SyntheticCorpus { records, regimes, documents })
}

/// Daily description of one record under `regime`.
pub fn daily_document(rec: &RawDailyRecord, next_date: &str, regime: &Regime) -> FinMapDocument {
    let direction = if rec.close >= rec.open { "higher" } else { "lower" };
    FinMapDocument::new(Level::Daily, Span::new(rec.date.clone(), next_date))
        .with("Sentiment", "MS", format!("{} {}", regime.sentiment, regime.label))
        .with("RatesBonds", "DF", regime.theme.clone())
        .with("RatesBonds", "FP", format!("open {:.3} close {:.3} high {:.3} low {:.3}", rec.open, rec.close, rec.high, rec.low))
        .with("RatesBonds", "CBT", format!("futures closed {direction}"))
        .with("Events", "ME", format!("{} regime session", regime.label))
}

/// Days since 1970-01-01 for a proleptic Gregorian date.
fn days_from_civil(y: i64, m: i64, d: i64) -> i64 {
    let y = if m <= 2 { y - 1 } else { y };
    let era = if y >= 0 { y } else { y - 399 } / 400;
    let yoe = y - era * 400;
    let mp = (m + 9) % 12;
    let doy = (153 * mp + 2) / 5 + d - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146_097 + doe - 719_468
}

fn civil_from_days(z: i64) -> (i64, i64, i64) {
    let z = z + 719_468;
    let era = if z >= 0 { z } else { z - 146_096 } / 146_097;
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    (yoe + era * 400 + (m <= 2) as i64, m, d)
}

fn parse_date(s: &str) -> Result<i64> {
    let bad = || Error::InvalidConfig(format!("date {s:?} is not YYYY-MM-DD"));
    let mut parts = s.splitn(3, '-');
    let mut next = || parts.next().and_then(|p| p.parse::<i64>().ok()).ok_or_else(bad);
    let (y, m, d) = (next()?, next()?, next()?);
    if !(1..=12).contains(&m) || !(1..=31).contains(&d) {
        return Err(bad());
    }
    Ok(days_from_civil(y, m, d))
}

/// `count` consecutive weekdays starting at `start` (moved forward off a weekend).
pub fn business_days(start: &str, count: usize) -> Result<Vec<String>> {
    let mut day = parse_date(start)?;
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        // 1970-01-01 was a Thursday
        let weekday = (day + 3).rem_euclid(7);
        if weekday < 5 {
            let (y, m, d) = civil_from_days(day);
            out.push(format!("{y:04}-{m:02}-{d:02}"));
        }
        day += 1;
    }
    Ok(out)
}

/// Least-squares slope of `y` against its index.
pub fn trend_slope(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    if y.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, v) in y.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (v - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calendar() {
        assert_eq!(days_from_civil(1970, 1, 1), 0);
        assert_eq!(civil_from_days(days_from_civil(2024, 2, 29)), (2024, 2, 29));
        // 2024-03-01 is a Friday
        assert_eq!(business_days("2024-03-01", 3).unwrap(), ["2024-03-01", "2024-03-04", "2024-03-05"]);
        assert!(business_days("2024-13-01", 1).is_err());
    }

    #[test]
    fn bounded_and_valid() {
        let c = generate(&SyntheticCorpusSpec::default()).unwrap();
        assert_eq!(c.records.len(), 600);
        for r in &c.records {
            assert!(r.check().is_ok());
            for p in [r.open, r.high, r.low, r.close, r.settle] {
                assert!((PRICE_FLOOR..=PRICE_CEIL).contains(&p));
            }
        }
        assert_eq!(c.documents[0].span.end, c.documents[1].span.start);
    }

    #[test]
    fn upward_drift_gives_positive_slope() {
        let spec = SyntheticCorpusSpec { n_days: 100, regimes: alloc::vec![Regime::up()], block_days: 100, ..Default::default() };
        let c = generate(&spec).unwrap();
        let closes: Vec<f64> = c.records.iter().map(|r| r.close).collect();
        assert!(trend_slope(&closes) > 0.0);
        assert_eq!(trend_slope(&[1.0, 3.0, 5.0]), 2.0);
    }

    #[test]
    fn deterministic() {
        let s = SyntheticCorpusSpec::default();
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
    }
}
