//! Named learnable tensors.
//!
//! Parameters live outside any tape. Each training step watches the full set
//! on a fresh tape and writes updated values back by name. Initialization is
//! seeded per parameter name, so the values a name receives do not depend on
//! which other parameters exist or the order they were created in; runs that
//! share a seed and a name produce identical tensors.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::{Gradients, Tape, Tensor};

/// Insertion-ordered map of named parameters.
#[derive(Debug, Clone)]
pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
    index: HashMap<String, usize>,
    seed: u64,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new(seed: u64) -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor<S> {
        &self.values[self.index[name]]
    }

    /// Registration order, the order serialization and flattening use.
    pub fn names(&self) -> Vec<String> {
        self.names.clone()
    }

    /// Replaces a parameter's values; the shape must not change. Any tape
    /// lineage on `value` is dropped.
    pub fn set(&mut self, name: &str, value: Tensor<S>) {
        let slot = self.index[name];
        assert_eq!(
            self.values[slot].shape(),
            value.shape(),
            "parameter {name} update keeps its shape"
        );
        self.values[slot] = value.detach();
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    pub fn insert(&mut self, name: &str, value: Tensor<S>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
    }

    /// Weight initialization: uniform in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`.
    pub fn add_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
        let n: usize = shape.iter().product();
        let data: Vec<S> = (0..n)
            .map(|_| S::lit(rng.gen_range(-bound..bound)))
            .collect();
        self.insert(name, Tensor::from_vec(shape.to_vec(), data).unwrap());
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn add_ones(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::full(shape, S::one()));
    }

    /// Watches every parameter on `tape` and returns handles keyed by name.
    pub fn watch_all(&self, tape: &Tape<S>) -> WatchedParams<S> {
        let mut watched = WatchedParams {
            by_name: HashMap::with_capacity(self.names.len()),
        };
        for (name, value) in self.iter() {
            watched.by_name.insert(name.to_string(), tape.watch(value));
        }
        watched
    }

    pub fn any_non_finite(&self) -> bool {
        self.values
            .iter()
            .any(|t| t.data().iter().any(|v| !v.is_finite()))
    }
}

/// Tape handles for one step, keyed by parameter name.
pub struct WatchedParams<S: Scalar> {
    by_name: HashMap<String, Tensor<S>>,
}

impl<S: Scalar> WatchedParams<S> {
    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.by_name.get(name)
    }

    /// Gradient for the named parameter, zeros if the loss never reached it.
    pub fn grad_by_name(&self, grads: &Gradients<S>, name: &str) -> Tensor<S> {
        let t = self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} was not watched"));
        grads.grad_or_zeros(t)
    }
}

/// Stable 64-bit FNV-1a, mixed with the run seed. Used so a parameter's
/// initialization stream depends only on (seed, name).
pub fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ seed.wrapping_mul(0x9e3779b97f4a7c15)
}
