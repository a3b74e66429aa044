//! Named parameter arrays.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Flat, ordered map from parameter name to array.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.params.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.params.insert(name.into(), value);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<f64>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count over parameters whose name satisfies `pred`.
    pub fn count_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn total(&self) -> usize {
        self.count_where(|_| true)
    }

    pub(crate) fn trunc_normal<R: Rng>(
        &mut self,
        rng: &mut R,
        name: impl Into<String>,
        shape: (usize, usize),
        std: f64,
    ) {
        self.insert(name, trunc_normal(rng, shape, std));
    }

    pub(crate) fn zeros(&mut self, name: impl Into<String>, shape: (usize, usize)) {
        self.insert(name, Array2::zeros(shape));
    }

    pub(crate) fn filled(&mut self, name: impl Into<String>, shape: (usize, usize), v: f64) {
        self.insert(name, Array2::from_elem(shape, v));
    }

    /// Linear layer `{prefix}.w` (in x out) and `{prefix}.b` (1 x out).
    pub(crate) fn linear<R: Rng>(
        &mut self,
        rng: &mut R,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
    ) {
        self.trunc_normal(rng, format!("{prefix}.w"), (fan_in, fan_out), std);
        self.zeros(format!("{prefix}.b"), (1, fan_out));
    }

    pub(crate) fn layer_norm(&mut self, prefix: &str, dim: usize) {
        self.filled(format!("{prefix}.g"), (1, dim), 1.0);
        self.zeros(format!("{prefix}.b"), (1, dim));
    }
}

/// Normal samples re-drawn until they fall within two standard deviations.
pub fn trunc_normal<R: Rng>(rng: &mut R, shape: (usize, usize), std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Array2::from_shape_simple_fn(shape, || loop {
        let z: f64 = normal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    })
}
