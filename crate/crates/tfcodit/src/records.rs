//! CSV files of daily records and normalized series.
//!
//! Raw records use the ingestion header
//! `date,open,high,low,close,settle,value,volume,open_interest`; normalized
//! series use the same columns holding normalized values.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use tfcodit_core::preprocess::RawDailyRecord;
use tfcodit_core::signal::{Contract, TimeSeries, CHANNELS, CHANNEL_NAMES};
use tfcodit_core::tensor::Matrix;

use crate::error::{csv_err, io_err, Error, Result};

const HEADER: [&str; CHANNELS + 1] = ["date", "open", "high", "low", "close", "settle", "value", "volume", "open_interest"];

pub fn read_records(path: &Path) -> Result<Vec<RawDailyRecord>> {
    let mut rd = csv::Reader::from_path(path).map_err(csv_err(path))?;
    check_header(path, rd.headers().map_err(csv_err(path))?)?;
    let mut out = Vec::new();
    for (i, row) in rd.deserialize::<RawDailyRecord>().enumerate() {
        let rec = row.map_err(csv_err(path))?;
        rec.check().map_err(|e| Error::MissingData(format!("{} row {}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[RawDailyRecord]) -> Result<()> {
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in records {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes a normalized series; `dates[t]` labels step `t` (blank when absent).
pub fn write_series(path: &Path, series: &TimeSeries, dates: &[String]) -> Result<()> {
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(HEADER).map_err(csv_err(path))?;
    let v = series.values();
    for t in 0..series.steps() {
        let mut row = Vec::with_capacity(CHANNELS + 1);
        row.push(dates.get(t).cloned().unwrap_or_default());
        for c in 0..CHANNELS {
            row.push(v.get(c, t).to_string());
        }
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a normalized series and its date column.
pub fn read_series(path: &Path, contract: Contract) -> Result<(TimeSeries, Vec<String>)> {
    let mut rd = csv::Reader::from_path(path).map_err(csv_err(path))?;
    check_header(path, rd.headers().map_err(csv_err(path))?)?;
    let mut dates = Vec::new();
    let mut cols: Vec<[f64; CHANNELS]> = Vec::new();
    for row in rd.records() {
        let row = row.map_err(csv_err(path))?;
        dates.push(row[0].to_string());
        let mut vals = [0.0; CHANNELS];
        for (c, slot) in vals.iter_mut().enumerate() {
            *slot =
                row[c + 1].trim().parse().map_err(|_| Error::MissingData(format!("{}: bad {} value {:?}", path.display(), CHANNEL_NAMES[c], &row[c + 1])))?;
        }
        cols.push(vals);
    }
    if cols.is_empty() {
        return Err(Error::MissingData(format!("{} has no rows", path.display())));
    }
    let m = Matrix::from_fn(CHANNELS, cols.len(), |c, t| cols[t][c]);
    Ok((TimeSeries::new(m, contract, true)?, dates))
}

fn check_header(path: &Path, h: &csv::StringRecord) -> Result<()> {
    if h.iter().map(str::trim).ne(HEADER) {
        return Err(Error::MissingData(format!("{}: header must be {}", path.display(), HEADER.join(","))));
    }
    Ok(())
}

pub(crate) fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(())
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    let mut f = File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(date: &str, open: f64) -> RawDailyRecord {
        RawDailyRecord {
            date: date.into(),
            open,
            high: open + 0.5,
            low: open - 0.5,
            close: open + 0.1,
            settle: open,
            value: 1234.5,
            volume: 10.0,
            open_interest: 500.0,
        }
    }

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/T.csv");
        let recs = vec![rec("2024-01-02", 100.0), rec("2024-01-03", 100.25)];
        write_records(&p, &recs).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("date,open,high,low,close,settle,value,volume,open_interest\n"));
        assert_eq!(read_records(&p).unwrap(), recs);
    }

    #[test]
    fn rejects_bad_header_and_invalid_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        std::fs::write(&p, "date,open\n2024-01-02,1\n").unwrap();
        assert!(read_records(&p).is_err());
        std::fs::write(&p, "date,open,high,low,close,settle,value,volume,open_interest\n2024-01-02,100,99,98,100,100,1,1,1\n").unwrap();
        assert!(matches!(read_records(&p), Err(Error::MissingData(_))));
    }

    #[test]
    fn series_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let m = Matrix::from_fn(CHANNELS, 3, |c, t| (c as f64 + 0.1) / (t as f64 + 3.0));
        let s = TimeSeries::new(m, Contract::TF, true).unwrap();
        let dates = vec!["d0".to_string(), "d1".into(), "d2".into()];
        write_series(&p, &s, &dates).unwrap();
        let (back, d) = read_series(&p, Contract::TF).unwrap();
        assert_eq!(back, s);
        assert_eq!(d, dates);
    }
}
