//! Named parameter storage and per-forward binding onto a graph.

use std::collections::BTreeMap;

use mce_tensor::{Graph, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::derive_seed;
use crate::error::{MceError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Parameters keyed by dotted name, iterated in sorted order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.entries.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| MceError::contract("params", format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }
}

/// How a freshly created parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Zero-mean normal with variance `gain / fan_in`.
    Normal {
        fan_in: usize,
        gain: f64,
    },
}

/// Creates parameters whose values depend only on `(seed, name)`, so models
/// that share a sub-module also share its initialization.
pub struct Initializer {
    seed: u64,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer { seed }
    }

    pub fn make(&self, name: &str, shape: &[usize], init: Init) -> Tensor {
        match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::Normal { fan_in, gain } => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, name, 0));
                let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("valid std");
                Tensor::from_fn(shape, |_| normal.sample(&mut rng) as Real)
            }
        }
    }

    /// A conv weight `[O×C×k×k]` cut from the weight a full input layout of
    /// `full_in` channels would get, keeping input channels `keep` in order.
    /// Variants that drop input channels then start from the same values on
    /// the channels they retain.
    pub fn make_conv_subset(
        &self,
        name: &str,
        out: usize,
        full_in: usize,
        k: usize,
        keep: &[usize],
        gain: f64,
    ) -> Tensor {
        let fan_in = keep.len() * k * k;
        let full = self.make(name, &[out, full_in, k, k], Init::Normal { fan_in, gain });
        let kk = k * k;
        let mut data = Vec::with_capacity(out * keep.len() * kk);
        for o in 0..out {
            for &c in keep {
                let at = (o * full_in + c) * kk;
                data.extend_from_slice(&full.data()[at..at + kk]);
            }
        }
        Tensor::new(vec![out, keep.len(), k, k], data).expect("subset shape")
    }
}

/// A graph plus lazily bound parameters for one forward pass.
pub struct Session<'s> {
    pub g: Graph,
    store: &'s ParamStore,
    bound: BTreeMap<String, Var>,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Session {
            g: Graph::new(),
            store,
            bound: BTreeMap::new(),
        }
    }

    /// Binds `name` on first use: trainable parameters become gradient
    /// leaves, frozen ones constants.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let param = self
            .store
            .get(name)
            .ok_or_else(|| MceError::contract("params", format!("unknown parameter {name}")))?;
        let v = self.g.leaf(param.value.clone(), param.trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Adopts an existing graph in which some parameters are already bound,
    /// e.g. by a finite-difference harness.
    pub fn with_bindings(g: Graph, store: &'s ParamStore, bound: BTreeMap<String, Var>) -> Self {
        Session { g, store, bound }
    }

    pub fn into_graph(self) -> Graph {
        self.g
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Parameters touched by the forward pass so far.
    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }
}
