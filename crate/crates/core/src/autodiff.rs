//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] walks the record in reverse and accumulates gradients
//! for every node that (transitively) depends on a parameter.

use alloc::vec::Vec;

use crate::params::ParamId;
use crate::tensor::{axpy, dot, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, rstd: Vec<f64> },
    Gelu(Var),
    Silu(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    TileRows(Var, usize),
    Sum(Var),
    GatherRows(Var, Vec<usize>),
    Rotary { x: Var, cos: Matrix, sin: Matrix },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A trainable leaf. Its gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, value: Matrix) -> Var {
        self.push(value, Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a @ b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape(), (1, av.cols()), "add_row expects a 1×cols row");
        let mut v = av.clone();
        for r in 0..v.rows() {
            for (x, b) in v.row_mut(r).iter_mut().zip(rv.as_slice()) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by a `1×n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape(), (1, av.cols()), "mul_row expects a 1×cols row");
        let mut v = av.clone();
        for r in 0..v.rows() {
            for (x, b) in v.row_mut(r).iter_mut().zip(rv.as_slice()) {
                *x *= b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    /// Row-wise softmax. Entries equal to `-inf` get probability zero; every
    /// row must keep at least one finite entry.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = libm::exp(*x - max);
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::SoftmaxRows(a), ng)
    }

    /// Row-wise standardization `(x - mean) / sqrt(var + eps)`, no affine part.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut v = self.value(a).clone();
        let n = v.cols() as f64;
        let mut rstd = Vec::with_capacity(v.rows());
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let rs = 1.0 / libm::sqrt(var + eps);
            for x in row.iter_mut() {
                *x = (*x - mean) * rs;
            }
            rstd.push(rs);
        }
        let ng = self.ng(a);
        self.push(v, Op::LayerNormRows { x: a, rstd }, ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 0.5 * x * (1.0 + libm::tanh(GELU_C * (x + 0.044715 * x * x * x))));
        let ng = self.ng(a);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x / (1.0 + libm::exp(-x)));
        let ng = self.ng(a);
        self.push(v, Op::Silu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(libm::exp);
        let ng = self.ng(a);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        let ng = self.ng(a);
        self.push(v, Op::Abs(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(v, Op::Square(a), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_rows(start, len);
        let ng = self.ng(a);
        self.push(v, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_cols(start, len);
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a, start), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pv.as_slice());
            rows += pv.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Row-major reinterpretation of the buffer.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a).clone().reshape(rows, cols);
        let ng = self.ng(a);
        self.push(v, Op::Reshape(a), ng)
    }

    /// Stacks `times` copies of `a` vertically.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Var {
        let av = self.value(a);
        let mut data = Vec::with_capacity(av.len() * times);
        for _ in 0..times {
            data.extend_from_slice(av.as_slice());
        }
        let v = Matrix::from_vec(av.rows() * times, av.cols(), data);
        let ng = self.ng(a);
        self.push(v, Op::TileRows(a, times), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Embedding lookup: row `i` of the result is row `indices[i]` of `table`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let tv = self.value(table);
        let mut data = Vec::with_capacity(indices.len() * tv.cols());
        for &i in indices {
            data.extend_from_slice(tv.row(i));
        }
        let v = Matrix::from_vec(indices.len(), tv.cols(), data);
        let ng = self.ng(table);
        self.push(v, Op::GatherRows(table, indices.to_vec()), ng)
    }

    /// Rotates consecutive column pairs `(2i, 2i+1)` of every row by the angle
    /// whose cosine/sine are stored at `(row, i)` of the tables.
    pub fn rotary(&mut self, a: Var, cos: Matrix, sin: Matrix) -> Var {
        let av = self.value(a);
        assert_eq!(av.cols() % 2, 0, "rotary needs an even width");
        assert_eq!(cos.shape(), (av.rows(), av.cols() / 2), "rotary table shape");
        assert_eq!(sin.shape(), cos.shape(), "rotary table shape");
        let mut v = av.clone();
        for r in 0..v.rows() {
            let (c, s) = (cos.row(r), sin.row(r));
            let row = v.row_mut(r);
            for i in 0..c.len() {
                let (x0, x1) = (row[2 * i], row[2 * i + 1]);
                row[2 * i] = x0 * c[i] - x1 * s[i];
                row[2 * i + 1] = x0 * s[i] + x1 * c[i];
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::Rotary { x: a, cos, sin }, ng)
    }

    /// Reverse sweep from a `1×1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Gradients { grads, params }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b)));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*b) {
                    self.accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*row) {
                    self.accumulate(grads, *row, column_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row);
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        for (x, b) in ga.row_mut(r).iter_mut().zip(rv.as_slice()) {
                            *x *= b;
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*row) {
                    let av = self.value(*a);
                    let mut gr = Matrix::zeros(1, rv.cols());
                    for r in 0..g.rows() {
                        for ((acc, x), y) in gr.as_mut_slice().iter_mut().zip(g.row(r)).zip(av.row(r)) {
                            *acc += x * y;
                        }
                    }
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::SoftmaxRows(a) => {
                let mut ga = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (p, gr) = (out.row(r), g.row(r));
                    let inner = dot(p, gr);
                    for ((o, &pi), &gi) in ga.row_mut(r).iter_mut().zip(p).zip(gr) {
                        *o = pi * (gi - inner);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNormRows { x, rstd } => {
                let n = out.cols() as f64;
                let mut ga = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = dot(gr, y) / n;
                    for ((o, &yi), &gi) in ga.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *o = rstd[r] * (gi - mean_g - yi * mean_gy);
                    }
                }
                self.accumulate(grads, *x, ga);
            }
            Op::Gelu(a) => {
                let ga = g.zip_map(self.value(*a), |gi, x| {
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let t = libm::tanh(u);
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    gi * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Silu(a) => {
                let ga = g.zip_map(self.value(*a), |gi, x| {
                    let s = 1.0 / (1.0 + libm::exp(-x));
                    gi * (s + x * s * (1.0 - s))
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(out, |gi, y| gi * y)),
            Op::Abs(a) => {
                let ga = g.zip_map(self.value(*a), |gi, x| {
                    if x > 0.0 {
                        gi
                    } else if x < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Square(a) => self.accumulate(grads, *a, g.zip_map(self.value(*a), |gi, x| 2.0 * gi * x)),
            Op::SliceRows(a, start) => {
                let av = self.value(*a);
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                let c = av.cols();
                ga.as_mut_slice()[start * c..start * c + g.len()].copy_from_slice(g.as_slice());
                self.accumulate(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut row = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.ng(p) {
                        self.accumulate(grads, p, g.slice_rows(row, rows));
                    }
                    row += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.ng(p) {
                        self.accumulate(grads, p, g.slice_cols(col, cols));
                    }
                    col += cols;
                }
            }
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, g.clone().reshape(r, c));
            }
            Op::TileRows(a, times) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for t in 0..*times {
                    axpy(1.0, &g.as_slice()[t * r * c..(t + 1) * r * c], ga.as_mut_slice());
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::GatherRows(table, indices) => {
                let (r, c) = self.value(*table).shape();
                let mut gt = Matrix::zeros(r, c);
                for (i, &src) in indices.iter().enumerate() {
                    axpy(1.0, g.row(i), gt.row_mut(src));
                }
                self.accumulate(grads, *table, gt);
            }
            Op::Rotary { x, cos, sin } => {
                let mut ga = g.clone();
                for r in 0..ga.rows() {
                    let (c, s) = (cos.row(r), sin.row(r));
                    let row = ga.row_mut(r);
                    for i in 0..c.len() {
                        let (g0, g1) = (row[2 * i], row[2 * i + 1]);
                        row[2 * i] = g0 * c[i] + g1 * s[i];
                        row[2 * i + 1] = -g0 * s[i] + g1 * c[i];
                    }
                }
                self.accumulate(grads, *x, ga);
            }
        }
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        axpy(1.0, g.row(r), out.as_mut_slice());
    }
    out
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`, if `v` influenced it.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradients summed per parameter (a parameter may appear on the tape more
    /// than once).
    pub fn param_grads(&self) -> Vec<(ParamId, Matrix)> {
        let mut out: Vec<(ParamId, Matrix)> = Vec::new();
        for &(id, node) in &self.params {
            let Some(g) = &self.grads[node] else { continue };
            match out.iter_mut().find(|(pid, _)| *pid == id) {
                Some((_, acc)) => acc.add_assign(g),
                None => out.push((id, g.clone())),
            }
        }
        out
    }
}

/// Convenience: a zero-filled gradient buffer per parameter.
pub fn zero_like(shapes: &[(usize, usize)]) -> Vec<Matrix> {
    shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect()
}
