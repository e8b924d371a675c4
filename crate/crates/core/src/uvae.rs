//! U-shaped variational autoencoder over wavelet grids.
//!
//! Every channel's `Γ × T` map is cut into `N = N_f · N_t` patches of
//! `P_f × P_t`, each projected to `d_c = d / N` dims and offset by axial
//! (frequency, time) embeddings; the flattened tokens of one channel form one
//! `d`-wide row of `H⁰ ∈ R^{C×d}`.
//!
//! The encoder stacks latent-query attention layers. Layer `ℓ` attends from a
//! learned query table `Q^ℓ ∈ R^{C_ℓ×d}` (with `C_ℓ = C / r^ℓ`) into the
//! previous hidden state, so the row count shrinks `C → … → 1`. The final row
//! parameterizes a diagonal Gaussian.
//!
//! The decoder mirrors the stack. Decoder layer `ℓ` reuses the encoder table
//! `Q^ℓ`: each of its `C_ℓ` rows is projected to `r · d` and split into `r`
//! query rows, giving the `C_{ℓ-1}` queries that read from `U^ℓ`. Query rows
//! are added back before normalization; without that path the first decoder
//! layer, which reads a single key row, would emit identical rows for all
//! queries.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{multi_head_attention, sinusoidal_table, LayerNorm, Linear};
use crate::params::{init_normal, Graph, ParamId, ParamStore};
use crate::signal::WaveletGrid;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconLoss {
    L1,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionalMode {
    /// Fixed sinusoidal tables.
    Sinusoidal,
    /// Learned tables, initialized sinusoidally.
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UVaeConfig {
    pub channels: usize,
    /// Series length `T`.
    pub steps: usize,
    /// Decomposition level `J`; the grid has `J + 1` rows.
    pub level: usize,
    pub layers: usize,
    pub reduction: usize,
    /// Hidden width `d`.
    pub width: usize,
    pub encoder_heads: Vec<usize>,
    /// In application order (deepest layer first).
    pub decoder_heads: Vec<usize>,
    pub patch_freq: usize,
    pub patch_time: usize,
    pub kl_weight: f64,
    pub recon_loss: ReconLoss,
    pub positional: PositionalMode,
}

impl Default for UVaeConfig {
    fn default() -> Self {
        Self::for_horizon(32)
    }
}

impl UVaeConfig {
    /// Hyper-parameters used for every horizon: `J = 3`, `2 × T/8` patches,
    /// giving the same `2 × 8 × 4` latent grid for all lengths divisible by 8.
    pub fn for_horizon(steps: usize) -> Self {
        Self {
            channels: 8,
            steps,
            level: 3,
            layers: 3,
            reduction: 2,
            width: 64,
            encoder_heads: vec![16, 8, 4],
            decoder_heads: vec![4, 8, 16],
            patch_freq: 2,
            patch_time: (steps / 8).max(1),
            kl_weight: 1e-4,
            recon_loss: ReconLoss::L1,
            positional: PositionalMode::Sinusoidal,
        }
    }

    pub fn scales(&self) -> usize {
        self.level + 1
    }

    pub fn n_freq(&self) -> usize {
        self.scales() / self.patch_freq.max(1)
    }

    pub fn n_time(&self) -> usize {
        self.steps / self.patch_time.max(1)
    }

    /// Patches per channel, `N`.
    pub fn tokens(&self) -> usize {
        self.n_freq() * self.n_time()
    }

    /// Per-token width, `d_c = d / N`.
    pub fn token_width(&self) -> usize {
        self.width / self.tokens().max(1)
    }

    pub fn patch_len(&self) -> usize {
        self.patch_freq * self.patch_time
    }

    /// Row counts `C_0 = C, C_1, ..., C_L = 1`.
    pub fn channel_schedule(&self) -> Vec<usize> {
        let mut out = vec![self.channels];
        let mut c = self.channels;
        for _ in 0..self.layers {
            c /= self.reduction.max(1);
            out.push(c);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::InvalidConfig(m));
        if self.layers == 0 || self.reduction < 1 || self.width == 0 || self.channels == 0 {
            return bad("layers, reduction, width and channels must be positive".into());
        }
        let mut c = self.channels;
        for l in 1..=self.layers {
            if c % self.reduction != 0 {
                return bad(format!("C_{l} = {c}/{} is not integral", self.reduction));
            }
            c /= self.reduction;
        }
        if c != 1 {
            return bad(format!("channel schedule ends at {c}, expected 1"));
        }
        if self.patch_freq == 0 || self.patch_time == 0 || self.scales() % self.patch_freq != 0 || self.steps % self.patch_time != 0 {
            return Err(Error::PatchSizeMismatch { pf: self.patch_freq, pt: self.patch_time, rows: self.scales(), cols: self.steps });
        }
        if self.width % self.tokens() != 0 {
            return bad(format!("N = {} does not divide d = {}", self.tokens(), self.width));
        }
        if self.encoder_heads.len() != self.layers || self.decoder_heads.len() != self.layers {
            return bad("one head count per layer is required".into());
        }
        if let Some(h) = self.encoder_heads.iter().chain(&self.decoder_heads).find(|&&h| h == 0 || self.width % h != 0) {
            return bad(format!("{h} heads do not divide d = {}", self.width));
        }
        if !(self.kl_weight >= 0.0) {
            return bad("kl_weight must be non-negative".into());
        }
        Ok(())
    }
}

/// Bottleneck draw: mean, log-variance and sample, each `d` long.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSample {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
    pub sample: Vec<f64>,
    pub n_freq: usize,
    pub n_time: usize,
    pub token_width: usize,
}

impl LatentSample {
    /// `z0` as an `(N_f·N_t) × d_c` matrix whose row `f·N_t + t` is grid cell
    /// `(f, t)`. The buffer is `z0` unchanged.
    pub fn grid(&self) -> Matrix {
        latent_grid(&self.sample, self.n_freq * self.n_time, self.token_width)
    }

    pub fn at(&self, f: usize, t: usize, k: usize) -> f64 {
        self.sample[(f * self.n_time + t) * self.token_width + k]
    }
}

pub fn latent_grid(z: &[f64], cells: usize, token_width: usize) -> Matrix {
    Matrix::from_vec(cells, token_width, z.to_vec())
}

/// Cuts each channel map into patches: row `c·N + i·N_t + j` holds patch
/// `(i, j)` of channel `c`, flattened row-major.
pub fn extract_patches(grid: &WaveletGrid, pf: usize, pt: usize) -> Result<Matrix> {
    let (channels, rows, cols) = grid.shape();
    if pf == 0 || pt == 0 || rows % pf != 0 || cols % pt != 0 {
        return Err(Error::PatchSizeMismatch { pf, pt, rows, cols });
    }
    let (nf, nt) = (rows / pf, cols / pt);
    let mut out = Matrix::zeros(channels * nf * nt, pf * pt);
    for c in 0..channels {
        for i in 0..nf {
            for j in 0..nt {
                let r = c * nf * nt + i * nt + j;
                let dst = out.row_mut(r);
                for a in 0..pf {
                    for b in 0..pt {
                        dst[a * pt + b] = grid.get(c, i * pf + a, j * pt + b);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `unpatch[k]` is the flat patch-buffer index holding grid element `k`
/// (grid flattened channel-major, then row, then step).
fn unpatch_indices(channels: usize, rows: usize, cols: usize, pf: usize, pt: usize) -> Vec<usize> {
    let (nf, nt) = (rows / pf, cols / pt);
    let mut idx = Vec::with_capacity(channels * rows * cols);
    for c in 0..channels {
        for r in 0..rows {
            for t in 0..cols {
                let (i, a, j, b) = (r / pf, r % pf, t / pt, t % pt);
                let patch = c * nf * nt + i * nt + j;
                idx.push(patch * pf * pt + a * pt + b);
            }
        }
    }
    idx
}

#[derive(Debug, Clone)]
struct LqaLayer {
    query_proj: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    norm: LayerNorm,
    heads: usize,
}

impl LqaLayer {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, width: usize, query_out: usize, heads: usize) -> Self {
        Self {
            query_proj: Linear::new(store, rng, &format!("{name}.wq"), width, query_out, false),
            key: Linear::new(store, rng, &format!("{name}.wk"), width, width, false),
            value: Linear::new(store, rng, &format!("{name}.wv"), width, width, false),
            out: Linear::new(store, rng, &format!("{name}.wo"), width, width, true),
            norm: LayerNorm::new(store, &format!("{name}.ln"), width),
            heads,
        }
    }
}

/// Intermediate values of one encoder pass.
pub struct EncoderTrace {
    /// `H⁰ .. H^L`.
    pub hidden: Vec<Var>,
    /// Attention weights of every head, per layer.
    pub attention: Vec<Vec<Var>>,
    pub mean: Var,
    pub log_var: Var,
}

/// Intermediate values of one decoder pass.
pub struct DecoderTrace {
    /// `U^L .. U⁰`.
    pub hidden: Vec<Var>,
    /// Reconstructed grid, `(C·Γ) × T`.
    pub output: Var,
}

/// Terms of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

#[derive(Debug, Clone)]
pub struct UVae {
    cfg: UVaeConfig,
    patch_embed: Linear,
    pe_freq: Option<ParamId>,
    pe_time: Option<ParamId>,
    queries: Vec<ParamId>,
    encoder: Vec<LqaLayer>,
    mean_head: Linear,
    log_var_head: Linear,
    linear_in: Linear,
    decoder: Vec<LqaLayer>,
    linear_out: Linear,
    grid_shift: ParamId,
    grid_log_scale: ParamId,
    pos_table: Matrix,
    unpatch: Vec<usize>,
    patch_order: Vec<usize>,
}

impl UVae {
    /// Registers freshly initialized parameters in `store`.
    pub fn new<R: Rng + ?Sized>(cfg: UVaeConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, dc, nf, nt) = (cfg.width, cfg.token_width(), cfg.n_freq(), cfg.n_time());
        let patch_embed = Linear::new(store, rng, "uvae.patch_embed", cfg.patch_len(), dc, true);
        let (pe_freq, pe_time) = match cfg.positional {
            PositionalMode::Learned => (Some(store.add("uvae.pe_freq", sinusoidal_table(nf, dc))), Some(store.add("uvae.pe_time", sinusoidal_table(nt, dc)))),
            PositionalMode::Sinusoidal => (None, None),
        };
        let schedule = cfg.channel_schedule();
        let query_std = libm::sqrt(1.0 / d as f64);
        let queries = (1..=cfg.layers).map(|l| store.add(format!("uvae.query.{l}"), init_normal(rng, schedule[l], d, query_std))).collect();
        let encoder = (1..=cfg.layers).map(|l| LqaLayer::new(store, rng, &format!("uvae.enc.{l}"), d, d, cfg.encoder_heads[l - 1])).collect();
        let mean_head = Linear::new(store, rng, "uvae.mean", d, d, true);
        let log_var_head = Linear::new(store, rng, "uvae.log_var", d, d, true);
        let linear_in = Linear::new(store, rng, "uvae.linear_in", d, schedule[cfg.layers] * d, true);
        let decoder = (1..=cfg.layers)
            .rev()
            .enumerate()
            .map(|(i, l)| LqaLayer::new(store, rng, &format!("uvae.dec.{l}"), d, cfg.reduction * d, cfg.decoder_heads[i]))
            .collect();
        let linear_out = Linear::new(store, rng, "uvae.linear_out", dc, cfg.patch_len(), true);
        let pos_table = axial_table(&sinusoidal_table(nf, dc), &sinusoidal_table(nt, dc));
        let unpatch = unpatch_indices(cfg.channels, cfg.scales(), cfg.steps, cfg.patch_freq, cfg.patch_time);
        let mut patch_order = vec![0; unpatch.len()];
        for (k, &p) in unpatch.iter().enumerate() {
            patch_order[p] = k;
        }
        let rows = cfg.channels * cfg.scales();
        let grid_shift = store.add("uvae.grid_shift", Matrix::zeros(rows, 1));
        let grid_log_scale = store.add("uvae.grid_log_scale", Matrix::zeros(rows, 1));
        store.set_trainable(grid_shift, false);
        store.set_trainable(grid_log_scale, false);
        Ok(Self {
            cfg,
            patch_embed,
            pe_freq,
            pe_time,
            queries,
            encoder,
            mean_head,
            log_var_head,
            linear_in,
            decoder,
            linear_out,
            grid_shift,
            grid_log_scale,
            pos_table,
            unpatch,
            patch_order,
        })
    }

    /// Rebuilds the model over parameters loaded by name, e.g. from a
    /// checkpoint. Returns the model and a store in registration order.
    pub fn bind(cfg: UVaeConfig, loaded: &ParamStore) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(0, 0);
        let model = Self::new(cfg, &mut store, &mut rng)?;
        if let Err(name) = store.adopt(loaded) {
            if let Some(layer) = name.strip_prefix("uvae.query.") {
                return Err(Error::MissingSharedQueries(layer.parse().unwrap_or(0)));
            }
            return Err(Error::ShapeMismatch(format!("parameter {name} missing or misshapen")));
        }
        Ok((model, store))
    }

    pub fn config(&self) -> &UVaeConfig {
        &self.cfg
    }

    /// Shared query table `Q^ℓ`, `ℓ` in `1..=L`.
    pub fn query(&self, layer: usize) -> ParamId {
        self.queries[layer - 1]
    }

    fn check_grid(&self, grid: &WaveletGrid) -> Result<()> {
        let want = (self.cfg.channels, self.cfg.scales(), self.cfg.steps);
        if grid.shape() != want {
            return Err(Error::ShapeMismatch(format!("grid {:?}, model expects {want:?}", grid.shape())));
        }
        Ok(())
    }

    /// Sets the per-(channel, row) grid scaler to the mean and standard
    /// deviation of `grids`. Rows with no spread keep unit scale.
    pub fn fit_grid_scaler(&self, store: &mut ParamStore, grids: &[&WaveletGrid]) -> Result<()> {
        if grids.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for g in grids {
            self.check_grid(g)?;
        }
        let (channels, scales) = (self.cfg.channels, self.cfg.scales());
        let mut shift = Matrix::zeros(channels * scales, 1);
        let mut log_scale = Matrix::zeros(channels * scales, 1);
        for c in 0..channels {
            for r in 0..scales {
                let n = (grids.len() * self.cfg.steps) as f64;
                let mean = grids.iter().flat_map(|g| g.row(c, r)).sum::<f64>() / n;
                let var = grids.iter().flat_map(|g| g.row(c, r)).map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                let sd = libm::sqrt(var);
                shift.set(c * scales + r, 0, mean);
                log_scale.set(c * scales + r, 0, if sd > 1e-12 { libm::log(sd) } else { 0.0 });
            }
        }
        *store.value_mut(self.grid_shift) = shift;
        *store.value_mut(self.grid_log_scale) = log_scale;
        Ok(())
    }

    /// Per-(channel, row) shift and scale column vectors `(C·Γ) × 1`.
    pub fn grid_scaler(&self, store: &ParamStore) -> (Matrix, Matrix) {
        (store.value(self.grid_shift).clone(), store.value(self.grid_log_scale).map(libm::exp))
    }

    /// Broadcasts a `(C·Γ) × 1` column over the `T` steps.
    fn spread_steps(&self, g: &mut Graph<'_>, col: Var) -> Var {
        let ones = g.constant(Matrix::from_vec(1, self.cfg.steps, vec![1.0; self.cfg.steps]));
        g.tape.matmul(col, ones)
    }

    fn standardize(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let shift = g.p(self.grid_shift);
        let shift = self.spread_steps(g, shift);
        let ls = g.p(self.grid_log_scale);
        let neg = g.tape.scale(ls, -1.0);
        let inv = g.tape.exp(neg);
        let inv = self.spread_steps(g, inv);
        let centered = g.tape.sub(x, shift);
        g.tape.mul(centered, inv)
    }

    fn destandardize(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let shift = g.p(self.grid_shift);
        let shift = self.spread_steps(g, shift);
        let ls = g.p(self.grid_log_scale);
        let scale = g.tape.exp(ls);
        let scale = self.spread_steps(g, scale);
        let scaled = g.tape.mul(x, scale);
        g.tape.add(scaled, shift)
    }

    /// Token rows `H⁰ ∈ R^{C×d}` on the graph.
    pub fn embed(&self, g: &mut Graph<'_>, grid: &WaveletGrid) -> Result<Var> {
        self.check_grid(grid)?;
        let cfg = &self.cfg;
        let w = g.constant(grid.to_stacked());
        let w = self.standardize(g, w);
        let flat = g.tape.reshape(w, self.patch_order.len(), 1);
        let p = g.tape.gather_rows(flat, &self.patch_order);
        let p = g.tape.reshape(p, cfg.channels * cfg.tokens(), cfg.patch_len());
        let tokens = self.patch_embed.forward(g, p);
        let pos = match (self.pe_freq, self.pe_time) {
            (Some(f), Some(t)) => {
                let (pf, pt) = (g.p(f), g.p(t));
                let nt = self.cfg.n_time();
                let nf = self.cfg.n_freq();
                // token (i, j) gets freq row i + time row j
                let fi: Vec<usize> = (0..nf * nt).map(|k| k / nt).collect();
                let tj: Vec<usize> = (0..nf * nt).map(|k| k % nt).collect();
                let a = g.tape.gather_rows(pf, &fi);
                let b = g.tape.gather_rows(pt, &tj);
                g.tape.add(a, b)
            }
            _ => g.constant(self.pos_table.clone()),
        };
        let pos = g.tape.tile_rows(pos, self.cfg.channels);
        let tokens = g.tape.add(tokens, pos);
        Ok(g.tape.reshape(tokens, self.cfg.channels, self.cfg.width))
    }

    /// Evaluated `H⁰`, `C × d`.
    pub fn patchify(&self, store: &ParamStore, grid: &WaveletGrid) -> Result<Matrix> {
        let mut g = Graph::new(store);
        let h = self.embed(&mut g, grid)?;
        Ok(g.value(h).clone())
    }

    /// One encoder layer `H^ℓ = LN(MHA(Q^ℓ W_q, H W_k, H W_v) W_o)`.
    pub fn encoder_layer(&self, g: &mut Graph<'_>, layer: usize, h: Var) -> (Var, Vec<Var>) {
        let l = &self.encoder[layer - 1];
        let q = g.p(self.queries[layer - 1]);
        let q = l.query_proj.forward(g, q);
        let k = l.key.forward(g, h);
        let v = l.value.forward(g, h);
        let (a, w) = multi_head_attention(g, q, k, v, l.heads, None);
        let a = l.out.forward(g, a);
        (l.norm.forward(g, a), w)
    }

    pub fn encode_graph(&self, g: &mut Graph<'_>, grid: &WaveletGrid) -> Result<EncoderTrace> {
        let h0 = self.embed(g, grid)?;
        let mut hidden = vec![h0];
        let mut attention = Vec::with_capacity(self.cfg.layers);
        let mut h = h0;
        for layer in 1..=self.cfg.layers {
            let (next, w) = self.encoder_layer(g, layer, h);
            hidden.push(next);
            attention.push(w);
            h = next;
        }
        let mean = self.mean_head.forward(g, h);
        let log_var = self.log_var_head.forward(g, h);
        Ok(EncoderTrace { hidden, attention, mean, log_var })
    }

    /// `z = μ + exp(log_var / 2) ⊙ ε`
    pub fn reparameterize(&self, g: &mut Graph<'_>, mean: Var, log_var: Var, noise: &Matrix) -> Var {
        let half = g.tape.scale(log_var, 0.5);
        let std = g.tape.exp(half);
        let eps = g.constant(noise.clone());
        let scaled = g.tape.mul(std, eps);
        g.tape.add(mean, scaled)
    }

    pub fn decode_graph(&self, g: &mut Graph<'_>, z: Var) -> DecoderTrace {
        let cfg = &self.cfg;
        let schedule = cfg.channel_schedule();
        let u = self.linear_in.forward(g, z);
        let mut u = g.tape.reshape(u, schedule[cfg.layers], cfg.width);
        let mut hidden = vec![u];
        for (i, layer) in (1..=cfg.layers).rev().enumerate() {
            let l = &self.decoder[i];
            let q = g.p(self.queries[layer - 1]);
            let q = l.query_proj.forward(g, q);
            let q = g.tape.reshape(q, schedule[layer - 1], cfg.width);
            let k = l.key.forward(g, u);
            let v = l.value.forward(g, u);
            let (a, _) = multi_head_attention(g, q, k, v, l.heads, None);
            let a = l.out.forward(g, a);
            let a = g.tape.add(q, a);
            u = l.norm.forward(g, a);
            hidden.push(u);
        }
        let tokens = g.tape.reshape(u, cfg.channels * cfg.tokens(), cfg.token_width());
        let patches = self.linear_out.forward(g, tokens);
        let flat = g.tape.reshape(patches, cfg.channels * cfg.tokens() * cfg.patch_len(), 1);
        let grid = g.tape.gather_rows(flat, &self.unpatch);
        let output = g.tape.reshape(grid, cfg.channels * cfg.scales(), cfg.steps);
        let output = self.destandardize(g, output);
        DecoderTrace { hidden, output }
    }

    /// Training objective for one grid; `noise` is the reparameterization
    /// draw (`1 × d`).
    pub fn loss_graph(&self, g: &mut Graph<'_>, grid: &WaveletGrid, noise: &Matrix) -> Result<(Var, ElboTerms)> {
        let enc = self.encode_graph(g, grid)?;
        let z = self.reparameterize(g, enc.mean, enc.log_var, noise);
        let dec = self.decode_graph(g, z);
        let target = g.constant(grid.to_stacked());
        let diff = g.tape.sub(dec.output, target);
        let per = match self.cfg.recon_loss {
            ReconLoss::L1 => g.tape.abs(diff),
            ReconLoss::Mse => g.tape.square(diff),
        };
        let recon = g.tape.mean(per);
        let kl = kl_graph(g, enc.mean, enc.log_var);
        let weighted = g.tape.scale(kl, self.cfg.kl_weight);
        let total = g.tape.add(recon, weighted);
        let terms = ElboTerms { total: g.value(total).get(0, 0), recon: g.value(recon).get(0, 0), kl: g.value(kl).get(0, 0) };
        Ok((total, terms))
    }

    /// Encodes a grid. `noise = None` gives `z0 = μ`.
    pub fn encode(&self, store: &ParamStore, grid: &WaveletGrid, noise: Option<&Matrix>) -> Result<LatentSample> {
        let mut g = Graph::new(store);
        let enc = self.encode_graph(&mut g, grid)?;
        let mean = g.value(enc.mean).as_slice().to_vec();
        let log_var = g.value(enc.log_var).as_slice().to_vec();
        let sample = match noise {
            None => mean.clone(),
            Some(eps) => {
                if eps.len() != mean.len() {
                    return Err(Error::ShapeMismatch(format!("noise has {} values, need {}", eps.len(), mean.len())));
                }
                mean.iter().zip(&log_var).zip(eps.as_slice()).map(|((m, lv), e)| m + libm::exp(lv / 2.0) * e).collect()
            }
        };
        Ok(LatentSample { mean, log_var, sample, n_freq: self.cfg.n_freq(), n_time: self.cfg.n_time(), token_width: self.cfg.token_width() })
    }

    pub fn decode(&self, store: &ParamStore, z: &[f64]) -> Result<WaveletGrid> {
        if z.len() != self.cfg.width {
            return Err(Error::ShapeMismatch(format!("latent has {} values, need {}", z.len(), self.cfg.width)));
        }
        let mut g = Graph::new(store);
        let zv = g.constant(Matrix::row_vector(z.to_vec()));
        let dec = self.decode_graph(&mut g, zv);
        WaveletGrid::from_stacked(g.value(dec.output), self.cfg.channels, self.cfg.level)
    }
}

fn axial_table(freq: &Matrix, time: &Matrix) -> Matrix {
    let (nf, nt, dc) = (freq.rows(), time.rows(), freq.cols());
    Matrix::from_fn(nf * nt, dc, |k, c| freq.get(k / nt, c) + time.get(k % nt, c))
}

/// `½ Σ (μ² + exp(log_var) − 1 − log_var)` as a `1×1` node.
pub fn kl_graph(g: &mut Graph<'_>, mean: Var, log_var: Var) -> Var {
    let m2 = g.tape.square(mean);
    let var = g.tape.exp(log_var);
    let a = g.tape.add(m2, var);
    let b = g.tape.sub(a, log_var);
    let s = g.tape.sum(b);
    let n = g.tape.shape(mean).1 as f64;
    let s = g.tape.scale(s, 0.5);
    let offset = g.constant(Matrix::filled(1, 1, -0.5 * n));
    g.tape.add(s, offset)
}

/// Closed-form `KL(N(μ, σ²) ‖ N(0, I))`.
pub fn kl_divergence(mean: &[f64], log_var: &[f64]) -> f64 {
    0.5 * mean.iter().zip(log_var).map(|(m, lv)| m * m + libm::exp(*lv) - 1.0 - lv).sum::<f64>()
}

/// Evaluated objective for a reconstruction `recon` of `target`.
pub fn elbo_loss(target: &WaveletGrid, recon: &WaveletGrid, mean: &[f64], log_var: &[f64], cfg: &UVaeConfig) -> Result<ElboTerms> {
    if target.shape() != recon.shape() || mean.len() != log_var.len() {
        return Err(Error::ShapeMismatch("elbo inputs differ in shape".into()));
    }
    let n = target.as_slice().len() as f64;
    let recon_term = target
        .as_slice()
        .iter()
        .zip(recon.as_slice())
        .map(|(a, b)| match cfg.recon_loss {
            ReconLoss::L1 => (a - b).abs(),
            ReconLoss::Mse => (a - b) * (a - b),
        })
        .sum::<f64>()
        / n;
    let kl = kl_divergence(mean, log_var);
    Ok(ElboTerms { total: recon_term + cfg.kl_weight * kl, recon: recon_term, kl })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{dwt_decompose, Contract, DecompositionConfig, TimeSeries};

    fn grid(steps: usize, level: usize, seed: u64) -> WaveletGrid {
        let mut rng = crate::rng::stream(seed, 0);
        let m = crate::rng::standard_normal(&mut rng, 8, steps);
        let s = TimeSeries::new(m, Contract::T, true).unwrap();
        dwt_decompose(&s, &DecompositionConfig::new(level)).unwrap()
    }

    fn model(cfg: UVaeConfig) -> (UVae, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(11, 0);
        let m = UVae::new(cfg, &mut store, &mut rng).unwrap();
        (m, store)
    }

    #[test]
    fn grid_arithmetic_for_default_fixture() {
        let c = UVaeConfig::for_horizon(32);
        assert_eq!((c.n_freq(), c.n_time(), c.tokens(), c.token_width(), c.width), (2, 8, 16, 4, 64));
        assert_eq!(c.channel_schedule(), vec![8, 4, 2, 1]);
        c.validate().unwrap();
    }

    #[test]
    fn config_rejections() {
        let mut c = UVaeConfig::for_horizon(32);
        c.patch_time = 5;
        assert!(matches!(c.validate(), Err(Error::PatchSizeMismatch { .. })));
        let mut c = UVaeConfig::for_horizon(32);
        c.reduction = 3;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        let mut c = UVaeConfig::for_horizon(32);
        c.width = 60;
        assert!(c.validate().is_err());
    }

    #[test]
    fn identity_projection_gives_raw_patches() {
        let mut cfg = UVaeConfig::for_horizon(32);
        cfg.width = 128; // d_c = 8 = P_f·P_t
        cfg.encoder_heads = vec![4, 4, 4];
        cfg.decoder_heads = vec![4, 4, 4];
        cfg.positional = PositionalMode::Learned;
        let (m, mut store) = model(cfg.clone());
        *store.value_mut(m.patch_embed.weight) = Matrix::from_fn(8, 8, |r, c| if r == c { 1.0 } else { 0.0 });
        *store.value_mut(m.patch_embed.bias.unwrap()) = Matrix::zeros(1, 8);
        *store.value_mut(m.pe_freq.unwrap()) = Matrix::zeros(2, 8);
        *store.value_mut(m.pe_time.unwrap()) = Matrix::zeros(8, 8);
        let g = grid(32, 3, 1);
        let h = m.patchify(&store, &g).unwrap();
        let raw = extract_patches(&g, 2, 4).unwrap();
        assert_eq!(h.as_slice(), raw.as_slice());
    }

    #[test]
    fn swapping_patches_swaps_tokens_only() {
        let cfg = UVaeConfig::for_horizon(32);
        let (m, store) = model(cfg.clone());
        let g = grid(32, 3, 2);
        let mut swapped = g.clone();
        // swap patches (0,0) and (0,2) of channel 5; rows 0-1 repeat over 8 steps
        for a in 0..2 {
            for b in 0..4 {
                let x = g.get(5, a, b);
                let y = g.get(5, a, 8 + b);
                swapped.set(5, a, b, y);
                swapped.set(5, a, 8 + b, x);
            }
        }
        let h1 = m.patchify(&store, &g).unwrap();
        let h2 = m.patchify(&store, &swapped).unwrap();
        // tokens other than the two swapped ones are untouched
        let dc = cfg.token_width();
        for c in 0..8 {
            for tok in 0..cfg.tokens() {
                let a = &h1.row(c)[tok * dc..(tok + 1) * dc];
                let b = &h2.row(c)[tok * dc..(tok + 1) * dc];
                if c == 5 && (tok == 0 || tok == 2) {
                    assert_ne!(a, b);
                } else {
                    assert_eq!(a, b);
                }
            }
        }
        // token content (before positions) moved between slots
        let pos = &m.pos_table;
        for k in 0..dc {
            let a = h1.row(5)[k] - pos.get(0, k);
            let b = h2.row(5)[2 * dc + k] - pos.get(2, k);
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_schedule_and_attention_rows() {
        let cfg = UVaeConfig::for_horizon(32);
        let (m, store) = model(cfg);
        let mut g = Graph::new(&store);
        let trace = m.encode_graph(&mut g, &grid(32, 3, 3)).unwrap();
        let rows: Vec<usize> = trace.hidden.iter().map(|&h| g.tape.shape(h).0).collect();
        assert_eq!(rows, vec![8, 4, 2, 1]);
        for layer in &trace.attention {
            for &w in layer {
                let wm = g.value(w);
                for r in 0..wm.rows() {
                    assert!((wm.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
        let z = g.tape.slice_rows(trace.mean, 0, 1);
        let dec = m.decode_graph(&mut g, z);
        let rows: Vec<usize> = dec.hidden.iter().map(|&h| g.tape.shape(h).0).collect();
        assert_eq!(rows, vec![1, 2, 4, 8]);
    }

    #[test]
    fn zero_noise_encode_is_mean() {
        let (m, store) = model(UVaeConfig::for_horizon(32));
        let g = grid(32, 3, 4);
        let a = m.encode(&store, &g, None).unwrap();
        let b = m.encode(&store, &g, Some(&Matrix::zeros(1, 64))).unwrap();
        assert_eq!(a.sample, a.mean);
        assert_eq!(a, b);
        let zg = a.grid();
        assert_eq!(zg.shape(), (16, 4));
        assert_eq!(zg.as_slice(), a.sample.as_slice());
        assert_eq!(a.at(1, 3, 2), a.sample[(8 + 3) * 4 + 2]);
    }

    #[test]
    fn decode_shape_and_query_sharing() {
        let (m, mut store) = model(UVaeConfig::for_horizon(32));
        let z: Vec<f64> = (0..64).map(|i| libm::sin(i as f64)).collect();
        let before = m.decode(&store, &z).unwrap();
        assert_eq!(before.shape(), (8, 4, 32));
        let q2 = m.query(2);
        let layer2_out = |store: &ParamStore| {
            let mut g = Graph::new(store);
            let zv = g.constant(Matrix::row_vector(z.clone()));
            let dec = m.decode_graph(&mut g, zv);
            // hidden[2] is the output of decoder layer 2 (U¹)
            g.value(dec.hidden[2]).clone()
        };
        let h_before = layer2_out(&store);
        store.value_mut(q2).as_mut_slice()[0] += 0.5;
        let h_after = layer2_out(&store);
        assert!(h_before.max_abs_diff(&h_after) > 1e-6);
        assert!(m.decode(&store, &z).unwrap().max_abs_diff_grid(&before) > 1e-9);
        assert!(matches!(m.decode(&store, &z[..10]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn bind_requires_shared_queries() {
        let (_, store) = model(UVaeConfig::for_horizon(32));
        let mut partial = ParamStore::new();
        for (_, p) in store.iter().filter(|(_, p)| p.name != "uvae.query.2") {
            partial.add(p.name.clone(), p.value.clone());
        }
        assert_eq!(UVae::bind(UVaeConfig::for_horizon(32), &partial).unwrap_err(), Error::MissingSharedQueries(2));
        let (_, rebound) = UVae::bind(UVaeConfig::for_horizon(32), &store).unwrap();
        assert_eq!(rebound, store);
    }

    #[test]
    fn elbo_examples() {
        let cfg = UVaeConfig::for_horizon(32);
        let g = grid(32, 3, 5);
        let zero = elbo_loss(&g, &g, &[0.0; 4], &[0.0; 4], &cfg).unwrap();
        assert_eq!(zero.total, 0.0);
        assert_eq!(kl_divergence(&[0.0; 3], &[0.0; 3]), 0.0);
        assert!((kl_divergence(&[1.0], &[0.0]) - 0.5).abs() < 1e-15);
        assert!((kl_divergence(&[1.0; 4], &[0.0; 4]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn graph_loss_matches_evaluated_loss() {
        let (m, store) = model(UVaeConfig::for_horizon(32));
        let g = grid(32, 3, 6);
        let eps = Matrix::zeros(1, 64);
        let mut gr = Graph::new(&store);
        let (_, terms) = m.loss_graph(&mut gr, &g, &eps).unwrap();
        let lat = m.encode(&store, &g, None).unwrap();
        let rec = m.decode(&store, &lat.sample).unwrap();
        let direct = elbo_loss(&g, &rec, &lat.mean, &lat.log_var, m.config()).unwrap();
        assert!((terms.total - direct.total).abs() < 1e-12);
        assert!((terms.kl - direct.kl).abs() < 1e-9);
    }
}
