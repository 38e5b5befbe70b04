//! Named-tensor parameter container and its `NTC0` file format.
//!
//! Layout (little-endian): magic `NTC0`, u32 version, u32 entry count, then per
//! entry `{u16 name length, name bytes, u8 rank, rank × u32 dims, f32 data}`.
//! Entries are written in name order.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::format::{put_f32s, put_u32, FormatError, Reader};
use crate::numerics::{Gradients, Graph, Tensor, Var};
use crate::{Error, Result};

pub const PARAMS_MAGIC: [u8; 4] = *b"NTC0";
pub const PARAMS_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<(), FormatError> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(FormatError::DuplicateName(name));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    /// Inserts or overwrites.
    pub fn set(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|k, _| !k.starts_with(prefix));
    }

    /// Copies every tensor of `other`, overwriting same-named entries.
    pub fn extend_from(&mut self, other: &ParamStore) {
        for (k, v) in &other.tensors {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// SHA-256 over names and values of every tensor whose name starts with `prefix`.
    pub fn digest(&self, prefix: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in self.tensors.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Plain gradient step on every bound trainable tensor.
    pub fn sgd_step(&mut self, binding: &Binding, grads: &Gradients, lr: f64) {
        for (name, var) in &binding.trainable {
            let Some(g) = grads.get(*var) else { continue };
            let t = self
                .tensors
                .get_mut(name)
                .expect("bound names come from the store");
            for (w, d) in t.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * d;
            }
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        let mut out = Vec::new();
        out.extend_from_slice(&PARAMS_MAGIC);
        put_u32(&mut out, PARAMS_VERSION);
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| FormatError::InvalidName)?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.rank())
                .map_err(|_| FormatError::InvalidShape(t.shape().to_vec()))?;
            out.push(rank);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            put_f32s(&mut out, t.data());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(PARAMS_MAGIC)?;
        r.version(PARAMS_VERSION)?;
        let count = r.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.bytes(len)?)
                .map_err(|_| FormatError::InvalidName)?
                .to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            if shape.is_empty() || shape.contains(&0) {
                return Err(FormatError::InvalidShape(shape));
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| FormatError::InvalidShape(shape.clone()))?;
            let data = r.f32s(numel)?.into_iter().map(f64::from).collect();
            let t =
                Tensor::new(shape.clone(), data).map_err(|_| FormatError::InvalidShape(shape))?;
            store.insert(name, t)?;
        }
        r.finish()?;
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rounds every value through `f32`, the precision of the file format.
    pub fn quantized(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), t.map(|v| v as f32 as f64)))
                .collect(),
        }
    }
}

/// Parameters placed on a graph: trainable ones as leaves, the rest as constants.
#[derive(Debug)]
pub struct Binding {
    vars: HashMap<String, Var>,
    trainable: Vec<(String, Var)>,
}

impl Binding {
    pub fn bind(g: &mut Graph, store: &ParamStore, trainable: impl Fn(&str) -> bool) -> Self {
        let mut vars = HashMap::with_capacity(store.len());
        let mut train = Vec::new();
        for (name, t) in store.iter() {
            let v = if trainable(name) {
                let v = g.leaf(t.clone());
                train.push((name.to_string(), v));
                v
            } else {
                g.constant(t.clone())
            };
            vars.insert(name.to_string(), v);
        }
        Self {
            vars,
            trainable: train,
        }
    }

    /// Wraps variables already on a graph; none are reported as trainable.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
            trainable: Vec::new(),
        }
    }

    /// Binds everything as constants.
    pub fn frozen(g: &mut Graph, store: &ParamStore) -> Self {
        Self::bind(g, store, |_| false)
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, Var)> {
        self.trainable.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Fan-in scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}
