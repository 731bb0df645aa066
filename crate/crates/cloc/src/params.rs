//! Named parameter tensors with deterministic initialization.

use crate::autodiff::{Real, Tape, Var};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// All learnable tensors of a model, keyed by a stable name. The map is
/// ordered so iteration (checkpointing, optimizer sweeps) is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F> {
    tensors: BTreeMap<String, Array2<F>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Array2<F>) {
        let prev = self.tensors.insert(name.to_owned(), value);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> &Array2<F> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<F> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<F>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Convert every tensor to another float width (f32 <-> f64).
    pub fn convert<G: Real>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for (name, t) in &self.tensors {
            out.insert(name, t.mapv(|x| G::from_f64(x.to_f64())));
        }
        out
    }

    /// Register every tensor as a leaf on a tape.
    pub fn bind<'t>(&self, tape: &'t Tape<F>) -> ParamVars {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.tensors {
            vars.insert(name.clone(), tape.leaf(t.clone()));
        }
        ParamVars { vars }
    }
}

/// Tape handles for every parameter of a bound store.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Truncated normal init: std 0.02, resampling anything beyond two
/// standard deviations.
pub fn trunc_normal<F: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<F> {
    let std = 0.02;
    Array2::from_shape_fn((rows, cols), |_| {
        loop {
            // Box-Muller from two uniforms keeps the dependency surface small
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            if z.abs() <= 2.0 {
                return F::from_f64(z * std);
            }
        }
    })
}

pub fn zeros<F: Real>(rows: usize, cols: usize) -> Array2<F> {
    Array2::zeros((rows, cols))
}

pub fn ones<F: Real>(rows: usize, cols: usize) -> Array2<F> {
    Array2::from_elem((rows, cols), F::one())
}
