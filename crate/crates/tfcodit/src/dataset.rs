//! Raw corpora, preprocessing and the per-horizon window tables.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tfcodit_core::finmap::{aggregate, FinMapDocument, Span};
use tfcodit_core::preprocess::{normalize, prompt_ref, split_train_test, NormalizationState};
use tfcodit_core::signal::{dwt_decompose, Contract, DecompositionConfig, TimeSeries, WaveletGrid};
use tfcodit_core::synthetic::SyntheticCorpus;

use crate::documents::{read_document, read_documents, write_document, write_documents};
use crate::error::{csv_err, io_err, json_err, Error, Result};
use crate::records::{read_records, read_series, read_text, write_records, write_series, write_text};

/// Paths under a data root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn raw_dir(&self) -> PathBuf {
        self.root.join("raw")
    }

    pub fn raw_records(&self, c: Contract) -> PathBuf {
        self.raw_dir().join(format!("{c}.csv"))
    }

    pub fn raw_documents(&self, c: Contract) -> PathBuf {
        self.raw_dir().join(format!("{c}_finmap.json"))
    }

    pub fn raw_regimes(&self, c: Contract) -> PathBuf {
        self.raw_dir().join(format!("{c}_regimes.csv"))
    }

    pub fn processed(&self, c: Contract) -> PathBuf {
        self.root.join("processed").join(c.as_str())
    }

    pub fn horizon_dir(&self, c: Contract, h: usize) -> PathBuf {
        self.processed(c).join(format!("h{h}"))
    }

    pub fn prompt_dir(&self, c: Contract, h: usize) -> PathBuf {
        self.horizon_dir(c, h).join("prompts")
    }

    pub fn truth_dir(&self, c: Contract, h: usize) -> PathBuf {
        self.horizon_dir(c, h).join("truth")
    }

    /// Contracts with a raw record file.
    pub fn contracts(&self) -> Vec<Contract> {
        Contract::ALL.into_iter().filter(|&c| self.raw_records(c).exists()).collect()
    }
}

/// File stem shared by a truth window and its generated trajectories.
pub fn window_stem(c: Contract, h: usize, start_date: &str) -> String {
    format!("{c}_h{h}_{start_date}")
}

/// Splits a stem built by [`window_stem`].
pub fn parse_stem(stem: &str) -> Option<(Contract, usize, &str)> {
    let (c, rest) = stem.split_once("_h")?;
    let (h, date) = rest.split_once('_')?;
    Some((Contract::parse(c)?, h.parse().ok()?, date))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowEntry {
    pub start: usize,
    pub start_date: String,
    pub part: Part,
    pub prompt_ref: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub train: Range<usize>,
    pub test: Range<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct RegimeRow<'a> {
    date: &'a str,
    regime: usize,
    label: &'a str,
}

/// Writes records, daily documents and regime labels of a synthetic corpus.
pub fn write_corpus(layout: &Layout, contract: Contract, corpus: &SyntheticCorpus, labels: &[String]) -> Result<()> {
    write_records(&layout.raw_records(contract), &corpus.records)?;
    write_documents(&layout.raw_documents(contract), &corpus.documents)?;
    let path = layout.raw_regimes(contract);
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    for (rec, &k) in corpus.records.iter().zip(&corpus.regimes) {
        let label = labels.get(k).map_or("", String::as_str);
        w.serialize(RegimeRow { date: &rec.date, regime: k, label }).map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))
}

/// Regime index per raw record.
pub fn read_regimes(layout: &Layout, contract: Contract) -> Result<Vec<usize>> {
    #[derive(Deserialize)]
    struct Row {
        regime: usize,
    }
    let path = layout.raw_regimes(contract);
    let mut rd = csv::Reader::from_path(&path).map_err(csv_err(&path))?;
    rd.deserialize::<Row>().map(|r| r.map(|r| r.regime).map_err(csv_err(&path))).collect()
}

/// What `preprocess` produced for one contract.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub contract: Contract,
    pub steps: usize,
    pub train_steps: usize,
    /// `(horizon, train windows, test windows)`.
    pub horizons: Vec<(usize, usize, usize)>,
    pub prompts: bool,
}

/// Periodic prompt for each window start, built from the daily documents of
/// its steps.
pub fn window_prompts(docs: &[FinMapDocument], dates: &[String], starts: &[usize], horizon: usize) -> Result<Vec<FinMapDocument>> {
    let by_date: BTreeMap<&str, &FinMapDocument> = docs.iter().map(|d| (d.span.start.as_str(), d)).collect();
    starts
        .iter()
        .map(|&s| {
            let kids = dates[s..s + horizon]
                .iter()
                .map(|d| by_date.get(d.as_str()).map(|&doc| doc.clone()).ok_or_else(|| Error::MissingData(format!("no daily document for {d}"))))
                .collect::<Result<Vec<_>>>()?;
            let span = Span::new(kids[0].span.start.clone(), kids[horizon - 1].span.end.clone());
            Ok(aggregate(&kids, &span)?)
        })
        .collect()
}

/// Normalizes one contract, splits off the test tail and writes the window
/// tables, prompts and truth files of every horizon.
pub fn preprocess(layout: &Layout, contract: Contract, horizons: &[usize]) -> Result<Summary> {
    let records = read_records(&layout.raw_records(contract))?;
    let (series, state) = normalize(&records, contract)?;
    let split = split_train_test(series.steps())?;
    let dir = layout.processed(contract);
    write_series(&dir.join("normalized.csv"), &series, &state.dates)?;
    write_json(&dir.join("state.json"), &state)?;
    write_json(&dir.join("split.json"), &SplitRecord { train: split.train.clone(), test: split.test.clone() })?;

    let docs_path = layout.raw_documents(contract);
    let docs = if docs_path.exists() { Some(read_documents(&docs_path)?) } else { None };
    let mut summary = Summary { contract, steps: series.steps(), train_steps: split.train.len(), horizons: Vec::new(), prompts: docs.is_some() };
    for &h in horizons {
        let (train, test_all) = split.window_starts(h);
        let test: Vec<usize> = test_all.into_iter().filter(|s| (s - split.test.start) % h == 0).collect();
        let entry = |s: usize, part| WindowEntry { start: s, start_date: state.dates[s].clone(), part, prompt_ref: prompt_ref(contract, h, &state.dates[s]) };
        let windows: Vec<WindowEntry> = train.iter().map(|&s| entry(s, Part::Train)).chain(test.iter().map(|&s| entry(s, Part::Test))).collect();
        let hdir = layout.horizon_dir(contract, h);
        write_json(&hdir.join("windows.json"), &windows)?;
        if let Some(docs) = &docs {
            let starts: Vec<usize> = windows.iter().map(|w| w.start).collect();
            let prompts = window_prompts(docs, &state.dates, &starts, h)?;
            write_documents(&hdir.join("prompts.json"), &prompts)?;
            for (w, p) in windows.iter().zip(&prompts).filter(|(w, _)| w.part == Part::Test) {
                write_document(&layout.prompt_dir(contract, h).join(format!("{}.json", w.start_date)), p)?;
            }
        }
        for w in windows.iter().filter(|w| w.part == Part::Test) {
            let path = layout.truth_dir(contract, h).join(format!("{}.csv", window_stem(contract, h, &w.start_date)));
            write_series(&path, &series.window(w.start, h), &state.dates[w.start..w.start + h])?;
        }
        summary.horizons.push((h, train.len(), test.len()));
    }
    Ok(summary)
}

/// A preprocessed contract.
#[derive(Debug, Clone, PartialEq)]
pub struct Processed {
    pub series: TimeSeries,
    pub state: NormalizationState,
    pub split: SplitRecord,
}

pub fn load_processed(layout: &Layout, contract: Contract) -> Result<Processed> {
    let dir = layout.processed(contract);
    let path = dir.join("normalized.csv");
    if !path.exists() {
        return Err(Error::MissingData(format!("{} not found; run preprocess first", path.display())));
    }
    let (series, _) = read_series(&path, contract)?;
    Ok(Processed { series, state: read_json(&dir.join("state.json"))?, split: read_json(&dir.join("split.json"))? })
}

/// Window table and (when available) prompts of one horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonData {
    pub horizon: usize,
    pub windows: Vec<WindowEntry>,
    pub prompts: Option<Vec<FinMapDocument>>,
}

impl HorizonData {
    /// Indices of training windows taken every `stride`.
    pub fn train_indices(&self, stride: usize) -> Vec<usize> {
        self.windows.iter().enumerate().filter(|(_, w)| w.part == Part::Train).map(|(i, _)| i).step_by(stride.max(1)).collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.windows.iter().enumerate().filter(|(_, w)| w.part == Part::Test).map(|(i, _)| i).collect()
    }
}

pub fn load_horizon(layout: &Layout, contract: Contract, horizon: usize) -> Result<HorizonData> {
    let dir = layout.horizon_dir(contract, horizon);
    let table = dir.join("windows.json");
    if !table.exists() {
        return Err(Error::MissingData(format!("{} not found; run preprocess with horizon {horizon}", table.display())));
    }
    let windows: Vec<WindowEntry> = read_json(&table)?;
    let prompt_path = dir.join("prompts.json");
    let prompts = if prompt_path.exists() { Some(read_documents(&prompt_path)?) } else { None };
    if prompts.as_ref().is_some_and(|p| p.len() != windows.len()) {
        return Err(Error::MissingData(format!("{} does not match the window table", prompt_path.display())));
    }
    Ok(HorizonData { horizon, windows, prompts })
}

/// Wavelet grids of the given windows.
pub fn grids(p: &Processed, data: &HorizonData, indices: &[usize], level: usize) -> Result<Vec<WaveletGrid>> {
    let cfg = DecompositionConfig::new(level);
    indices.iter().map(|&i| Ok(dwt_decompose(&p.series.window(data.windows[i].start, data.horizon), &cfg)?)).collect()
}

pub fn read_prompt(path: &Path) -> Result<FinMapDocument> {
    read_document(path)
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(json_err(path))?;
    write_text(path, &(text + "\n"))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(json_err(path))
}
