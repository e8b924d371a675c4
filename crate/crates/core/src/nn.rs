//! Layer building blocks shared by the autoencoder and the denoiser.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::Var;
use crate::params::{init_uniform_fan_in, Graph, ParamId, ParamStore};
use crate::tensor::Matrix;

pub const LN_EPS: f64 = 1e-5;

/// `y = x W + b` with `W: in × out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let weight = store.add(format!("{name}.weight"), init_uniform_fan_in(rng, fan_in, fan_out, fan_in));
        let bias = bias.then(|| store.add(format!("{name}.bias"), init_uniform_fan_in(rng, 1, fan_out, fan_in)));
        Self { weight, bias }
    }

    /// Zero-initialized projection.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Matrix::zeros(fan_in, fan_out));
        let bias = Some(store.add(format!("{name}.bias"), Matrix::zeros(1, fan_out)));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.p(self.weight);
        let y = g.tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.p(b);
                g.tape.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        core::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Row-wise layer normalization with learned gain and offset.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub offset: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Matrix::filled(1, width, 1.0));
        let offset = store.add(format!("{name}.offset"), Matrix::zeros(1, width));
        Self { gain, offset }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let n = g.tape.layer_norm_rows(x, LN_EPS);
        let gain = g.p(self.gain);
        let offset = g.p(self.offset);
        let y = g.tape.mul_row(n, gain);
        g.tape.add_row(y, offset)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.gain, self.offset]
    }
}

/// Scaled dot-product attention split over `heads` column blocks.
///
/// `q: n × w`, `k, v: m × w`; `mask` is an optional additive `n × m` matrix.
/// Returns the concatenated head outputs (`n × w`) and, for inspection, the
/// attention weights of every head.
pub fn multi_head_attention(g: &mut Graph<'_>, q: Var, k: Var, v: Var, heads: usize, mask: Option<Var>) -> (Var, Vec<Var>) {
    let width = g.tape.shape(q).1;
    assert_eq!(width % heads, 0, "heads must divide the width");
    let hd = width / heads;
    let scale = 1.0 / libm::sqrt(hd as f64);
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) =
            if heads == 1 { (q, k, v) } else { (g.tape.slice_cols(q, h * hd, hd), g.tape.slice_cols(k, h * hd, hd), g.tape.slice_cols(v, h * hd, hd)) };
        let scores = g.tape.matmul_t(qh, kh);
        let scores = g.tape.scale(scores, scale);
        let scores = match mask {
            Some(m) => g.tape.add(scores, m),
            None => scores,
        };
        let attn = g.tape.softmax_rows(scores);
        weights.push(attn);
        outs.push(g.tape.matmul(attn, vh));
    }
    let out = if heads == 1 { outs[0] } else { g.tape.concat_cols(&outs) };
    (out, weights)
}

/// Standard sinusoidal table: row `p`, column `2i` = `sin(p / 10000^(2i/w))`,
/// column `2i+1` = the cosine.
pub fn sinusoidal_table(positions: usize, width: usize) -> Matrix {
    Matrix::from_fn(positions, width, |p, c| {
        let i = (c / 2) as f64;
        let freq = libm::pow(10_000.0, -2.0 * i / width as f64);
        let angle = p as f64 * freq;
        if c % 2 == 0 {
            libm::sin(angle)
        } else {
            libm::cos(angle)
        }
    })
}

/// Sinusoidal embedding of a single (possibly fractional) position.
pub fn sinusoidal_embedding(position: f64, width: usize) -> Matrix {
    let half = width / 2;
    Matrix::from_fn(1, width, |_, c| {
        let i = (c % half.max(1)) as f64;
        let freq = libm::exp(-libm::log(10_000.0) * i / half.max(1) as f64);
        if c < half {
            libm::sin(position * freq)
        } else {
            libm::cos(position * freq)
        }
    })
}
