//! Central finite-difference comparison of tape gradients.

use alloc::vec::Vec;

use crate::autodiff::Var;
use crate::params::{Graph, ParamId, ParamStore};
use crate::tensor::Matrix;

/// Comparison result for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub id: ParamId,
    /// Relative error of every checked entry.
    pub errors: Vec<f64>,
}

impl ParamCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.errors.iter().fold(0.0, |a, &b| a.max(b))
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of `loss` with central differences of step `h`
/// for every entry of every parameter (or a strided subset with at most
/// `max_entries` entries per tensor). `loss` must rebuild the graph from the
/// given store and return its scalar output.
pub fn check_gradients<F>(store: &ParamStore, h: f64, floor: f64, max_entries: usize, mut loss: F) -> Vec<ParamCheck>
where
    F: FnMut(&mut Graph<'_>) -> Var,
{
    let analytic: Vec<Option<Matrix>> = {
        let mut g = Graph::with_all_gradients(store);
        let out = loss(&mut g);
        let grads = g.tape.backward(out).param_grads();
        let mut table: Vec<Option<Matrix>> = alloc::vec![None; store.len()];
        for (id, m) in grads {
            table[id.0] = Some(m);
        }
        table
    };
    let eval = |s: &ParamStore, loss: &mut F| {
        let mut g = Graph::new(s);
        let out = loss(&mut g);
        g.value(out).get(0, 0)
    };
    let mut probe = store.clone();
    let mut out = Vec::new();
    for id in store.ids() {
        let n = store.value(id).len();
        let stride = n.div_ceil(max_entries.max(1)).max(1);
        let zero = Matrix::zeros(store.value(id).rows(), store.value(id).cols());
        let grad = analytic[id.0].as_ref().unwrap_or(&zero);
        let mut errors = Vec::new();
        for k in (0..n).step_by(stride) {
            let x = store.value(id).as_slice()[k];
            probe.value_mut(id).as_mut_slice()[k] = x + h;
            let up = eval(&probe, &mut loss);
            probe.value_mut(id).as_mut_slice()[k] = x - h;
            let down = eval(&probe, &mut loss);
            probe.value_mut(id).as_mut_slice()[k] = x;
            let numeric = (up - down) / (2.0 * h);
            errors.push(relative_error(grad.as_slice()[k], numeric, floor));
        }
        out.push(ParamCheck { id, errors });
    }
    out
}

/// Fraction of checked scalar entries with relative error below `tol`.
pub fn pass_fraction(checks: &[ParamCheck], tol: f64) -> f64 {
    let total: usize = checks.iter().map(|c| c.errors.len()).sum();
    if total == 0 {
        return 1.0;
    }
    let ok: usize = checks.iter().map(|c| c.errors.iter().filter(|&&e| e < tol).count()).sum();
    ok as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let mut store = ParamStore::new();
        store.add("w", Matrix::from_vec(1, 3, alloc::vec![0.5, -1.0, 2.0]));
        let checks = check_gradients(&store, 1e-5, 1e-8, 100, |g| {
            let w = g.p(ParamId(0));
            let sq = g.tape.square(w);
            g.tape.sum(sq)
        });
        assert_eq!(checks[0].errors.len(), 3);
        assert!(checks[0].max_rel_error() < 1e-8);
        assert_eq!(pass_fraction(&checks, 1e-6), 1.0);
    }
}
