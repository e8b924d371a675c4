//! Latent diffusion: noise schedule, forward process, the text + latent
//! transformer denoiser and its ε-prediction objective.
//!
//! The denoiser reads one sequence `[text tokens ; latent tokens]`. Attention
//! is shared with an asymmetric mask (text causal over text, latent open over
//! everything), after which the two token groups use separate feed-forward
//! blocks. Only the latent block sees the timestep, through AdaLN.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::finmap::NULL_TOKEN;
use crate::nn::{multi_head_attention, sinusoidal_embedding, LayerNorm, Linear, LN_EPS};
use crate::params::{init_normal, Graph, ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear { beta_start: f64, beta_end: f64 },
    Cosine { offset: f64 },
}

/// `β_1 .. β_T` and the cumulative products `ᾱ_0 = 1, ᾱ_1, .., ᾱ_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Serializable schedule parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    #[serde(flatten)]
    pub kind: ScheduleKind,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { steps: 1000, kind: ScheduleKind::Linear { beta_start: 1e-4, beta_end: 0.02 } }
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::InvalidConfig(format!("linear schedule needs 0 < {beta_start} < {beta_end} < 1")));
        }
        let betas = (0..steps).map(|i| if steps == 1 { beta_start } else { beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64 }).collect();
        Ok(Self::from_betas(ScheduleKind::Linear { beta_start, beta_end }, betas))
    }

    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        if steps == 0 || !(offset >= 0.0) {
            return Err(Error::InvalidConfig("cosine schedule needs steps > 0 and offset >= 0".into()));
        }
        let f = |t: f64| {
            let c = libm::cos((t / steps as f64 + offset) / (1.0 + offset) * core::f64::consts::FRAC_PI_2);
            c * c
        };
        let betas = (1..=steps).map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).clamp(1e-8, 0.999)).collect();
        Ok(Self::from_betas(ScheduleKind::Cosine { offset }, betas))
    }

    pub fn from_params(p: &ScheduleParams) -> Result<Self> {
        match p.kind {
            ScheduleKind::Linear { beta_start, beta_end } => Self::linear(p.steps, beta_start, beta_end),
            ScheduleKind::Cosine { offset } => Self::cosine(p.steps, offset),
        }
    }

    fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Self {
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Self { kind, betas, alpha_bars }
    }

    pub fn params(&self) -> ScheduleParams {
        ScheduleParams { steps: self.steps(), kind: self.kind }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_t`, `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// `ᾱ_t`, `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::TimestepOutOfRange { t, max: self.steps() });
        }
        Ok(())
    }
}

/// `z_t = √ᾱ_t z0 + √(1−ᾱ_t) ε`
pub fn forward_noise(z0: &Matrix, t: usize, eps: &Matrix, schedule: &NoiseSchedule) -> Result<Matrix> {
    schedule.check(t)?;
    if z0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch(format!("z0 {:?} vs noise {:?}", z0.shape(), eps.shape())));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    Ok(z0.zip_map(eps, |z, e| a * z + b * e))
}

/// Additive attention mask over `[text ; latent]`: text row `i` sees text
/// columns `j ≤ i`; latent rows see every column.
pub fn build_mask(n_text: usize, m_latent: usize) -> Matrix {
    let s = n_text + m_latent;
    Matrix::from_fn(s, s, |i, j| if i >= n_text || (j <= i && j < n_text) { 0.0 } else { f64::NEG_INFINITY })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub layers: usize,
    /// Model width `D`.
    pub width: usize,
    pub heads: usize,
    /// Text capacity `N_max`.
    pub max_text: usize,
    pub n_freq: usize,
    pub n_time: usize,
    /// Latent token width `d_c`.
    pub latent_dim: usize,
    pub time_embed: usize,
    /// Feed-forward hidden width as a multiple of `D`.
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub freeze_body: bool,
    pub p_uncond: f64,
    /// Multiplier applied to encoder latents before diffusion.
    pub latent_scale: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            width: 128,
            heads: 4,
            max_text: 192,
            n_freq: 2,
            n_time: 8,
            latent_dim: 4,
            time_embed: 64,
            ffn_mult: 4,
            vocab_size: 512,
            freeze_body: false,
            p_uncond: 0.1,
            latent_scale: 1.0,
        }
    }
}

impl DenoiserConfig {
    /// Latent token count `M`.
    pub fn latent_tokens(&self) -> usize {
        self.n_freq * self.n_time
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.layers == 0 || self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad("heads must divide a positive width");
        }
        if self.head_dim() % 4 != 0 {
            return bad("head width must be a multiple of 4 for axial rotary phases");
        }
        if self.latent_tokens() == 0 || self.latent_dim == 0 || self.time_embed < 2 || self.ffn_mult == 0 {
            return bad("latent grid, time embedding and feed-forward sizes must be positive");
        }
        if self.vocab_size as u64 <= NULL_TOKEN as u64 {
            return bad("vocabulary must contain the null token");
        }
        if !(0.0..=1.0).contains(&self.p_uncond) || !(self.latent_scale > 0.0) {
            return bad("p_uncond must lie in [0, 1] and latent_scale must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, width: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.up"), width, hidden, true),
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, width, true),
        }
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.tape.gelu(h);
        self.down.forward(g, h)
    }
}

#[derive(Debug, Clone)]
struct Block {
    attn_norm: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    text_norm: LayerNorm,
    text_ffn: FeedForward,
    adaln: Linear,
    latent_ffn: FeedForward,
}

/// Hidden states after every layer plus the predicted noise.
pub struct DenoiserTrace {
    pub hidden: Vec<Var>,
    /// `M × d_c`, row `f·N_t + t`.
    pub output: Var,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    text_embed: ParamId,
    latent_in: Linear,
    time_in: Linear,
    time_out: Linear,
    blocks: Vec<Block>,
    out_norm: LayerNorm,
    out: Linear,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(cfg: DenoiserConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let text_embed = store.add("dit.text_embed", init_normal(rng, cfg.vocab_size, d, 1.0 / libm::sqrt(d as f64)));
        let latent_in = Linear::new(store, rng, "dit.latent_in", cfg.latent_dim, d, true);
        let time_in = Linear::new(store, rng, "dit.time.in", cfg.time_embed, d, true);
        let time_out = Linear::new(store, rng, "dit.time.out", d, d, true);
        let blocks = (0..cfg.layers)
            .map(|l| {
                let n = format!("dit.block.{l}");
                Block {
                    attn_norm: LayerNorm::new(store, &format!("{n}.attn_ln"), d),
                    wq: Linear::new(store, rng, &format!("{n}.wq"), d, d, false),
                    wk: Linear::new(store, rng, &format!("{n}.wk"), d, d, false),
                    wv: Linear::new(store, rng, &format!("{n}.wv"), d, d, false),
                    wo: Linear::new(store, rng, &format!("{n}.wo"), d, d, true),
                    text_norm: LayerNorm::new(store, &format!("{n}.text_ln"), d),
                    text_ffn: FeedForward::new(store, rng, &format!("{n}.text_ffn"), d, cfg.ffn_mult * d),
                    adaln: Linear::new(store, rng, &format!("{n}.adaln"), d, 2 * d, true),
                    latent_ffn: FeedForward::new(store, rng, &format!("{n}.latent_ffn"), d, cfg.ffn_mult * d),
                }
            })
            .collect();
        let out_norm = LayerNorm::new(store, "dit.out_ln", d);
        let out = Linear::new(store, rng, "dit.out", d, cfg.latent_dim, true);
        let model = Self { cfg, text_embed, latent_in, time_in, time_out, blocks, out_norm, out };
        if model.cfg.freeze_body {
            model.freeze_body(store);
        }
        Ok(model)
    }

    /// Rebuilds the model over parameters loaded by name.
    pub fn bind(cfg: DenoiserConfig, loaded: &ParamStore) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(0, 0);
        let model = Self::new(cfg, &mut store, &mut rng)?;
        store.adopt(loaded).map_err(|name| Error::ShapeMismatch(format!("parameter {name} missing or misshapen")))?;
        Ok((model, store))
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// Token embedding, latent projection and output head.
    pub fn head_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.text_embed];
        ids.extend(self.latent_in.params());
        ids.extend(self.out_norm.params());
        ids.extend(self.out.params());
        ids
    }

    /// Marks everything outside [`Self::head_params`] as frozen.
    pub fn freeze_body(&self, store: &mut ParamStore) {
        let head = self.head_params();
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let is_dit = store.get(id).name.starts_with("dit.");
            if is_dit && !head.contains(&id) {
                store.set_trainable(id, false);
            }
        }
    }

    /// AdaLN parameters of layer `l`, for inspection.
    pub fn adaln(&self, l: usize) -> Linear {
        self.blocks[l].adaln
    }

    fn check_inputs(&self, z: &Matrix, t: usize, tokens: &[u32]) -> Result<()> {
        let want = (self.cfg.latent_tokens(), self.cfg.latent_dim);
        if z.shape() != want {
            return Err(Error::ShapeMismatch(format!("latent {:?}, denoiser expects {want:?}", z.shape())));
        }
        if tokens.len() > self.cfg.max_text {
            return Err(Error::ShapeMismatch(format!("{} text tokens exceed capacity {}", tokens.len(), self.cfg.max_text)));
        }
        if let Some(&bad) = tokens.iter().find(|&&id| id as usize >= self.cfg.vocab_size) {
            return Err(Error::UnknownToken(bad));
        }
        if t == 0 {
            return Err(Error::TimestepOutOfRange { t, max: usize::MAX });
        }
        Ok(())
    }

    /// Cos/sin tables (`S × D/2`) for rotary phases. Text position `p` uses
    /// 1-D phases; latent cell `(f, t)` uses `f` on the first half of each
    /// head's pairs and `t` on the second half.
    fn rotary_tables(&self, n_text: usize) -> (Matrix, Matrix) {
        let m = self.cfg.latent_tokens();
        let nt = self.cfg.n_time;
        let pairs = self.cfg.head_dim() / 2;
        let half = pairs / 2;
        let angle = |row: usize, col: usize| {
            let i = col % pairs;
            if row < n_text {
                row as f64 * libm::pow(10_000.0, -(i as f64) / pairs as f64)
            } else {
                let k = row - n_text;
                let (pos, j) = if i < half { (k / nt, i) } else { (k % nt, i - half) };
                pos as f64 * libm::pow(10_000.0, -(j as f64) / half as f64)
            }
        };
        let cols = self.cfg.width / 2;
        let s = n_text + m;
        (Matrix::from_fn(s, cols, |r, c| libm::cos(angle(r, c))), Matrix::from_fn(s, cols, |r, c| libm::sin(angle(r, c))))
    }

    fn time_embedding(&self, g: &mut Graph<'_>, t: usize) -> Var {
        let e = g.constant(sinusoidal_embedding(t as f64, self.cfg.time_embed));
        let h = self.time_in.forward(g, e);
        let h = g.tape.silu(h);
        let h = self.time_out.forward(g, h);
        g.tape.silu(h)
    }

    /// Full forward pass. An empty `tokens` slice is the unconditional case.
    pub fn forward(&self, g: &mut Graph<'_>, z: &Matrix, t: usize, tokens: &[u32]) -> Result<DenoiserTrace> {
        self.check_inputs(z, t, tokens)?;
        let d = self.cfg.width;
        let n = tokens.len();
        let m = self.cfg.latent_tokens();
        let zin = g.constant(z.clone());
        let latent = self.latent_in.forward(g, zin);
        let mut h = if n == 0 {
            latent
        } else {
            let table = g.p(self.text_embed);
            let ids: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
            let text = g.tape.gather_rows(table, &ids);
            g.tape.concat_rows(&[text, latent])
        };
        let temb = self.time_embedding(g, t);
        let (cos, sin) = self.rotary_tables(n);
        let mask = g.constant(build_mask(n, m));
        let ones = g.constant(Matrix::filled(1, d, 1.0));
        let mut hidden = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let x = b.attn_norm.forward(g, h);
            let q = b.wq.forward(g, x);
            let q = g.tape.rotary(q, cos.clone(), sin.clone());
            let k = b.wk.forward(g, x);
            let k = g.tape.rotary(k, cos.clone(), sin.clone());
            let v = b.wv.forward(g, x);
            let (a, _) = multi_head_attention(g, q, k, v, self.cfg.heads, Some(mask));
            let a = b.wo.forward(g, a);
            h = g.tape.add(h, a);

            let lat = g.tape.slice_rows(h, n, m);
            let mod_ = b.adaln.forward(g, temb);
            let scale = g.tape.slice_cols(mod_, 0, d);
            let shift = g.tape.slice_cols(mod_, d, d);
            let gain = g.tape.add(scale, ones);
            let ln = g.tape.layer_norm_rows(lat, LN_EPS);
            let ln = g.tape.mul_row(ln, gain);
            let ln = g.tape.add_row(ln, shift);
            let f = b.latent_ffn.forward(g, ln);
            let lat = g.tape.add(lat, f);

            h = if n == 0 {
                lat
            } else {
                let text = g.tape.slice_rows(h, 0, n);
                let x = b.text_norm.forward(g, text);
                let f = b.text_ffn.forward(g, x);
                let text = g.tape.add(text, f);
                g.tape.concat_rows(&[text, lat])
            };
            hidden.push(h);
        }
        let lat = g.tape.slice_rows(h, n, m);
        let lat = self.out_norm.forward(g, lat);
        let output = self.out.forward(g, lat);
        Ok(DenoiserTrace { hidden, output })
    }

    /// Evaluated `ε̂(z_t, t, c)`.
    pub fn predict(&self, store: &ParamStore, z: &Matrix, t: usize, tokens: &[u32]) -> Result<Matrix> {
        let mut g = Graph::new(store);
        let trace = self.forward(&mut g, z, t, tokens)?;
        Ok(g.value(trace.output).clone())
    }
}

/// Maps a condition to the sequence the denoiser reads; the null
/// condition is the single null token.
pub fn condition_tokens(tokens: &[u32], drop: bool) -> Vec<u32> {
    if drop || tokens.is_empty() {
        vec![NULL_TOKEN]
    } else {
        tokens.to_vec()
    }
}

/// One training example: a latent grid (`M × d_c`) and its tokenized condition.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionExample {
    pub z0: Matrix,
    pub condition: Vec<u32>,
}

/// Per-example randomness of one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Matrix,
    pub drop_condition: bool,
}

pub fn draw_noise<R: Rng + ?Sized>(rng: &mut R, batch: &[DiffusionExample], schedule: &NoiseSchedule, p_uncond: f64) -> Vec<NoiseDraw> {
    batch
        .iter()
        .map(|ex| {
            let t = rng.random_range(1..=schedule.steps());
            let eps = crate::rng::standard_normal(rng, ex.z0.rows(), ex.z0.cols());
            let drop_condition = p_uncond > 0.0 && rng.random::<f64>() < p_uncond;
            NoiseDraw { t, eps, drop_condition }
        })
        .collect()
}

/// `mean ‖ε − ε_θ(z_t, t, c)‖²` per element, for given draws.
pub fn diffusion_loss_with(g: &mut Graph<'_>, model: &Denoiser, batch: &[DiffusionExample], draws: &[NoiseDraw], schedule: &NoiseSchedule) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if draws.len() != batch.len() {
        return Err(Error::ShapeMismatch(format!("{} draws for {} examples", draws.len(), batch.len())));
    }
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for (ex, dr) in batch.iter().zip(draws) {
        let zt = forward_noise(&ex.z0, dr.t, &dr.eps, schedule)?;
        let cond = condition_tokens(&ex.condition, dr.drop_condition);
        let trace = model.forward(g, &zt, dr.t, &cond)?;
        let target = g.constant(dr.eps.clone());
        let diff = g.tape.sub(trace.output, target);
        let sq = g.tape.square(diff);
        let s = g.tape.sum(sq);
        count += dr.eps.len();
        total = Some(match total {
            Some(acc) => g.tape.add(acc, s),
            None => s,
        });
    }
    let total = total.expect("non-empty batch");
    Ok(g.tape.scale(total, 1.0 / count as f64))
}

/// Draws `t ~ U{1..T}`, `ε ~ N(0, I)` and condition dropout from `rng`, then
/// evaluates [`diffusion_loss_with`].
pub fn diffusion_loss<R: Rng + ?Sized>(g: &mut Graph<'_>, model: &Denoiser, batch: &[DiffusionExample], schedule: &NoiseSchedule, rng: &mut R) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let draws = draw_noise(rng, batch, schedule, model.config().p_uncond);
    diffusion_loss_with(g, model, batch, &draws, schedule)
}

/// Loss of a fixed prediction against the noise, for checking the objective.
pub fn noise_prediction_loss(pred: &Matrix, eps: &Matrix) -> f64 {
    pred.as_slice().iter().zip(eps.as_slice()).map(|(p, e)| (p - e) * (p - e)).sum::<f64>() / eps.len() as f64
}
