//! Named parameter storage and the per-forward binding of parameters to a tape.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub trainable: bool,
}

/// Ordered collection of named parameters. Ids are insertion indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics if `name` is already registered.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.params.push(Param { name, value, trainable: true });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Copies values from `loaded` by name into this store. Returns the name
    /// of the first parameter that is missing from `loaded` or has a
    /// different shape there.
    pub fn adopt(&mut self, loaded: &ParamStore) -> core::result::Result<(), String> {
        for p in &mut self.params {
            let Some(src) = loaded.find(&p.name) else { return Err(p.name.clone()) };
            let src = &loaded.params[src.0];
            if src.value.shape() != p.value.shape() {
                return Err(p.name.clone());
            }
            p.value = src.value.clone();
        }
        Ok(())
    }

    /// Rounds every value to the nearest `f32`, so that a float32 checkpoint
    /// stores the parameters exactly.
    pub fn quantize_f32(&mut self) {
        for p in &mut self.params {
            for x in p.value.as_mut_slice() {
                *x = *x as f32 as f64;
            }
        }
    }
}

/// Symmetric uniform fan-in initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_uniform_fan_in<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

pub fn init_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("positive std");
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

/// A tape plus the parameter bindings of one forward pass.
///
/// Each parameter is placed on the tape at most once, so a parameter used in
/// several places (the shared latent queries) accumulates all its gradients.
/// Frozen parameters enter as constants.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    all_trainable: bool,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { tape: Tape::new(), store, bound: alloc::vec![None; store.len()], all_trainable: false }
    }

    /// Every parameter receives a gradient regardless of its trainable flag.
    pub fn with_all_gradients(store: &'a ParamStore) -> Self {
        let mut g = Self::new(store);
        g.all_trainable = true;
        g
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let param = self.store.get(id);
        let v = if param.trainable || self.all_trainable { self.tape.param(id, param.value.clone()) } else { self.tape.constant(param.value.clone()) };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.tape.constant(m)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        self.tape.value(v)
    }
}
