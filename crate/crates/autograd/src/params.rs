use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::Matrix;

/// Handle to a named parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Initialisation schemes used by the model layers.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Gaussian with the given standard deviation.
    Normal(f64),
    /// Glorot/Xavier uniform over `rows` fan-in and `cols` fan-out.
    XavierUniform,
    /// Identity on the leading square block, zeros elsewhere.
    Identity,
}

impl Init {
    pub fn build<R: Rng + ?Sized>(self, rows: usize, cols: usize, rng: &mut R) -> Matrix {
        match self {
            Init::Zeros => Array2::zeros((rows, cols)),
            Init::Ones => Array2::ones((rows, cols)),
            Init::Normal(std) => Array2::from_shape_fn((rows, cols), |_| {
                let v: f64 = StandardNormal.sample(rng);
                v * std
            }),
            Init::XavierUniform => {
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
            }
            Init::Identity => Array2::from_shape_fn((rows, cols), |(r, c)| if r == c { 1.0 } else { 0.0 }),
        }
    }
}

/// Ordered collection of named parameter matrices.
///
/// Names are unique and use `/`-separated namespaces (`mae/enc/0/attn/qkv/w`).
/// Insertion order is preserved and defines the serialisation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter. Panics if the name is already taken, since two
    /// layers claiming one name is a construction bug.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    /// Returns the existing parameter with this name, or inserts `value`.
    pub fn get_or_insert(&mut self, name: &str, value: impl FnOnce() -> Matrix) -> ParamId {
        match self.index.get(name) {
            Some(id) => *id,
            None => self.insert(name, value()),
        }
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> + '_ {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Ids of all parameters whose name starts with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter().filter(move |(_, n, _)| n.starts_with(prefix)).map(|(id, _, _)| id)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values of every
    /// parameter accepted by `filter`, in insertion order.
    pub fn digest(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut hasher = Sha256::new();
        for (_, name, value) in self.iter().filter(|(_, n, _)| filter(n)) {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            hasher.update((value.nrows() as u64).to_le_bytes());
            hasher.update((value.ncols() as u64).to_le_bytes());
            for v in value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Parameter gradients produced by [`crate::Tape::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub(crate) by_param: BTreeMap<ParamId, Matrix>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Matrix)> {
        self.by_param.iter_mut().map(|(k, v)| (*k, v))
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: Gradients) {
        for (id, g) in other.by_param {
            match self.by_param.get_mut(&id) {
                Some(acc) => *acc += &g,
                None => {
                    self.by_param.insert(id, g);
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.by_param.values_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    /// Drops every gradient whose parameter is rejected by `keep`.
    pub fn retain(&mut self, keep: impl Fn(ParamId) -> bool) {
        self.by_param.retain(|id, _| keep(*id));
    }

    pub fn global_norm(&self) -> f64 {
        self.by_param
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.by_param.values().all(|g| g.iter().all(|v| v.is_finite()))
    }
}
