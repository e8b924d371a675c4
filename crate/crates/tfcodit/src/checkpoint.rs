//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.json          names, shapes, dtype, files, byte ranges, config echo
//! <dir>/tensors/<name>.bin     little-endian f32, row-major
//! <dir>/optimizer/<name>.m.bin first moments (optional)
//! <dir>/optimizer/<name>.v.bin second moments (optional)
//! ```
//!
//! Training keeps every parameter and moment on the f32 grid, so a save and
//! load round trip is exact and resumed runs continue bit-identically.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tfcodit_core::optim::AdamWState;
use tfcodit_core::params::ParamStore;
use tfcodit_core::tensor::Matrix;

use crate::error::{io_err, json_err, Error, Result};
use crate::records::{read_text, write_text};

pub const FORMAT: &str = "tfcodit-checkpoint/1";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    /// Path relative to the checkpoint directory.
    pub file: String,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    /// `uvae` or `diffusion`.
    pub kind: String,
    /// Optimizer steps taken when saved.
    pub step: u64,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    /// Adam moments, named `m:<param>` and `v:<param>`.
    #[serde(default)]
    pub moments: Vec<TensorEntry>,
}

impl Manifest {
    pub fn config_as<T: DeserializeOwned>(&self, dir: &Path) -> Result<T> {
        serde_json::from_value(self.config.clone()).map_err(json_err(&dir.join(MANIFEST)))
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub dir: PathBuf,
    pub manifest: Manifest,
    /// Parameters in manifest order.
    pub params: ParamStore,
    moments: BTreeMap<String, Matrix>,
}

impl Checkpoint {
    pub fn has_optimizer_state(&self) -> bool {
        !self.moments.is_empty()
    }

    /// Adam state laid out for `store` (matched by parameter name).
    pub fn optimizer_state(&self, store: &ParamStore) -> Result<AdamWState> {
        let mut state = AdamWState::new(store);
        state.step = self.manifest.step;
        for (id, p) in store.iter() {
            for (prefix, slot) in [("m", &mut state.m[id.0]), ("v", &mut state.v[id.0])] {
                let m = self.moments.get(&format!("{prefix}:{}", p.name)).ok_or_else(|| self.fail(format!("no {prefix} moment for {}", p.name)))?;
                if m.shape() != p.value.shape() {
                    return Err(self.fail(format!("moment shape {:?} for {} of shape {:?}", m.shape(), p.name, p.value.shape())));
                }
                *slot = m.clone();
            }
        }
        Ok(state)
    }

    fn fail(&self, reason: String) -> Error {
        Error::Checkpoint { path: self.dir.clone(), reason }
    }
}

fn file_name(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' }).collect()
}

fn encode(m: &Matrix) -> Vec<u8> {
    m.as_slice().iter().flat_map(|&x| (x as f32).to_le_bytes()).collect()
}

fn write_tensor(dir: &Path, rel: String, name: String, m: &Matrix) -> Result<TensorEntry> {
    let path = dir.join(&rel);
    let bytes = encode(m);
    crate::records::create_parent(&path)?;
    std::fs::write(&path, &bytes).map_err(io_err(&path))?;
    Ok(TensorEntry { name, shape: [m.rows(), m.cols()], dtype: "f32".into(), file: rel, byte_offset: 0, byte_len: bytes.len() as u64 })
}

/// Writes `store` (and optionally optimizer moments) with a config echo.
pub fn save<C: Serialize>(dir: &Path, kind: &str, config: &C, store: &ParamStore, optimizer: Option<&AdamWState>) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tensors = Vec::with_capacity(store.len());
    let mut moments = Vec::new();
    for (id, p) in store.iter() {
        let stem = file_name(&p.name);
        tensors.push(write_tensor(dir, format!("tensors/{stem}.bin"), p.name.clone(), &p.value)?);
        if let Some(st) = optimizer {
            moments.push(write_tensor(dir, format!("optimizer/{stem}.m.bin"), format!("m:{}", p.name), &st.m[id.0])?);
            moments.push(write_tensor(dir, format!("optimizer/{stem}.v.bin"), format!("v:{}", p.name), &st.v[id.0])?);
        }
    }
    let manifest_path = dir.join(MANIFEST);
    let manifest = Manifest {
        format: FORMAT.into(),
        kind: kind.into(),
        step: optimizer.map_or(0, |s| s.step),
        config: serde_json::to_value(config).map_err(json_err(&manifest_path))?,
        tensors,
        moments,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(json_err(&manifest_path))?;
    write_text(&manifest_path, &(text + "\n"))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::Checkpoint { path: dir.to_path_buf(), reason: "no manifest.json".into() });
    }
    let m: Manifest = serde_json::from_str(&read_text(&path)?).map_err(json_err(&path))?;
    if m.format != FORMAT {
        return Err(Error::Checkpoint { path: dir.to_path_buf(), reason: format!("format {:?}, expected {FORMAT:?}", m.format) });
    }
    Ok(m)
}

/// Checks that every entry's byte range has the declared length, lies inside
/// its file and that ranges sharing a file do not overlap.
pub fn verify_layout(dir: &Path, manifest: &Manifest) -> Result<()> {
    let fail = |reason: String| Error::Checkpoint { path: dir.to_path_buf(), reason };
    let mut by_file: BTreeMap<&str, Vec<&TensorEntry>> = BTreeMap::new();
    for e in manifest.tensors.iter().chain(&manifest.moments) {
        if e.dtype != "f32" {
            return Err(fail(format!("{}: dtype {:?} is not f32", e.name, e.dtype)));
        }
        if e.byte_len != 4 * (e.shape[0] * e.shape[1]) as u64 {
            return Err(fail(format!("{}: {} bytes for shape {:?}", e.name, e.byte_len, e.shape)));
        }
        by_file.entry(e.file.as_str()).or_default().push(e);
    }
    for (file, mut entries) in by_file {
        let path = dir.join(file);
        let size = std::fs::metadata(&path).map_err(io_err(&path))?.len();
        entries.sort_by_key(|e| e.byte_offset);
        let mut end = 0;
        for e in entries {
            if e.byte_offset < end {
                return Err(fail(format!("{}: overlaps the previous tensor in {file}", e.name)));
            }
            end = e.byte_offset + e.byte_len;
            if end > size {
                return Err(fail(format!("{}: range ends at {end}, {file} has {size} bytes", e.name)));
            }
        }
    }
    Ok(())
}

fn read_tensor(dir: &Path, e: &TensorEntry) -> Result<Matrix> {
    let path = dir.join(&e.file);
    let bytes = std::fs::read(&path).map_err(io_err(&path))?;
    let (start, end) = (e.byte_offset as usize, (e.byte_offset + e.byte_len) as usize);
    let slice = bytes.get(start..end).ok_or_else(|| Error::Checkpoint { path: dir.to_path_buf(), reason: format!("{} is shorter than declared", e.file) })?;
    let data = slice.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
    Ok(Matrix::from_vec(e.shape[0], e.shape[1], data))
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    verify_layout(dir, &manifest)?;
    let mut params = ParamStore::new();
    for e in &manifest.tensors {
        params.add(e.name.clone(), read_tensor(dir, e)?);
    }
    let mut moments = BTreeMap::new();
    for e in &manifest.moments {
        moments.insert(e.name.clone(), read_tensor(dir, e)?);
    }
    Ok(Checkpoint { dir: dir.to_path_buf(), manifest, params, moments })
}

/// Loads a checkpoint and checks its kind.
pub fn load_kind(dir: &Path, kind: &str) -> Result<Checkpoint> {
    let ck = load(dir)?;
    if ck.manifest.kind != kind {
        return Err(Error::Checkpoint { path: dir.to_path_buf(), reason: format!("holds a {} model, expected {kind}", ck.manifest.kind) });
    }
    Ok(ck)
}
