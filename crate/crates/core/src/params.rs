//! Named trainable parameters and their JSON checkpoint format.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Parameters keyed by dotted path, iterated in path order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Serialize for ParameterStore {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let map: BTreeMap<&str, Entry> = self
            .params
            .iter()
            .map(|(k, v)| {
                let e = Entry {
                    shape: v.shape.clone(),
                    data: v.data.clone(),
                };
                (k.as_str(), e)
            })
            .collect();
        map.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ParameterStore {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<String, Entry>::deserialize(d)?;
        Self::from_entries(map).map_err(serde::de::Error::custom)
    }
}

/// Stable 64-bit value derived from a string, independent of std hashing.
pub(crate) fn stable_hash(s: &str) -> u64 {
    let digest = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Paths must be unique.
    pub fn insert(&mut self, path: &str, tensor: Tensor) -> Result<()> {
        if self.params.contains_key(path) {
            return Err(Error::contract(format!("duplicate parameter path `{path}`")));
        }
        self.params.insert(path.to_string(), tensor.with_grad());
        Ok(())
    }

    /// Register a weight drawn uniformly from ±1/√fan_in. Each path gets its
    /// own stream derived from `seed`, so the draw does not depend on
    /// registration order.
    pub fn init_uniform(&mut self, path: &str, shape: &[usize], fan_in: usize, seed: u64) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(path));
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(path, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn init_zeros(&mut self, path: &str, shape: &[usize]) -> Result<()> {
        self.insert(path, Tensor::zeros(shape))
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.params
            .get(path)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{path}`")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(path)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{path}`")))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Copy of the parameters under `prefix`.
    pub fn subset(&self, prefix: &str) -> ParameterStore {
        ParameterStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Insert or overwrite every parameter of `other`.
    pub fn merge(&mut self, other: &ParameterStore) {
        for (k, v) in &other.params {
            self.params.insert(k.clone(), v.clone());
        }
    }

    /// Move gradients recorded on `tape` for the bound variables into the
    /// store, accumulating into any existing gradient. Bound parameters the
    /// loss does not reach get a zero gradient.
    pub fn collect_grads(&mut self, tape: &Tape, bindings: &BTreeMap<String, Var>) -> Result<()> {
        for (path, var) in bindings {
            let t = self.get_mut(path)?;
            match tape.grad(*var) {
                Some(g) => t.accumulate_grad(g),
                None => t.accumulate_grad(&vec![0.0; t.len()]),
            }
        }
        Ok(())
    }

    /// SHA-256 over paths, shapes and exact bit patterns.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.params {
            h.update(k.as_bytes());
            for s in &v.shape {
                h.update((*s as u64).to_le_bytes());
            }
            for x in &v.data {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// One JSON object `{path: {shape, data}}`. Floats are written in their
    /// shortest exactly-round-tripping decimal form.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let map: BTreeMap<String, Entry> = serde_json::from_str(s)?;
        Self::from_entries(map)
    }

    fn from_entries(map: BTreeMap<String, Entry>) -> Result<Self> {
        let mut store = ParameterStore::new();
        for (k, e) in map {
            store.insert(&k, Tensor::new(e.shape, e.data)?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Lazily binds store parameters onto a tape, each at most once.
///
/// Only parameters actually used by a forward pass end up bound, and only
/// those receive gradients in [`ParameterStore::collect_grads`].
pub struct ParamScope<'a> {
    store: &'a ParameterStore,
    vars: BTreeMap<String, Var>,
    frozen: bool,
}

impl<'a> ParamScope<'a> {
    pub fn new(store: &'a ParameterStore) -> Self {
        ParamScope {
            store,
            vars: BTreeMap::new(),
            frozen: false,
        }
    }

    /// Bind every parameter as a constant: no gradients flow into them.
    pub fn frozen(store: &'a ParameterStore) -> Self {
        ParamScope {
            store,
            vars: BTreeMap::new(),
            frozen: true,
        }
    }

    pub fn get(&mut self, tape: &mut Tape, path: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(path) {
            return Ok(*v);
        }
        let t = self.store.get(path)?.clone();
        let v = if self.frozen { tape.constant(t) } else { tape.param(t) };
        self.vars.insert(path.to_string(), v);
        Ok(v)
    }

    /// Tape handle of an already bound parameter.
    pub fn var(&self, path: &str) -> Option<Var> {
        self.vars.get(path).copied()
    }

    pub fn store(&self) -> &ParameterStore {
        self.store
    }

    pub fn bound_paths(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    /// Release the store borrow, keeping the path-to-variable bindings.
    pub fn into_bindings(self) -> BTreeMap<String, Var> {
        self.vars
    }
}
