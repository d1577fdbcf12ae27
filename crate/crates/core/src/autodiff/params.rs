use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::graph::Bindings;
use super::Tensor;

/// Named trainable tensors, kept in name order so iteration is deterministic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Params(BTreeMap<String, Tensor>);

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.0.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }

    /// Adds a `fan_in × fan_out` weight (scaled normal) and a zero bias under `prefix`.
    pub fn add_linear<R: Rng>(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
        let std = (1.0 / fan_in as f64).sqrt();
        let w = Tensor::from_fn(&[fan_in, fan_out], |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        });
        self.insert(format!("{prefix}.w"), w);
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
    }

    /// Copy with every value replaced by zero.
    pub fn zeroed(&self) -> Self {
        Self(
            self.0
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        )
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor> {
        self.0
    }
}

impl From<BTreeMap<String, Tensor>> for Params {
    fn from(map: BTreeMap<String, Tensor>) -> Self {
        Self(map)
    }
}

impl Bindings for Params {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }
}
