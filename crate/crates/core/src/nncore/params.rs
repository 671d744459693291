use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Index of an entry in a [`ParamSet`]; stable for the lifetime of the set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T: Scalar = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Momentum buffer, persisted across optimizer steps.
    pub velocity: Tensor<T>,
    pub trainable: bool,
}

/// Ordered collection of named parameters with their gradients.
///
/// Iteration order is insertion order, so anything derived from a walk over
/// the set (digests, serialization) is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet<T: Scalar = f32> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::input(format!("duplicate parameter id `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        let velocity = Tensor::zeros(value.shape());
        let (idx, _) = self.entries.insert_full(
            name,
            ParamEntry {
                value,
                grad,
                velocity,
                trainable,
            },
        );
        Ok(ParamId(idx))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).expect("valid param id").0
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].grad
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &ParamEntry<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (k, v))| (ParamId(i), k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &str, &mut ParamEntry<T>)> {
        self.entries
            .iter_mut()
            .enumerate()
            .map(|(i, (k, v))| (ParamId(i), k.as_str(), v))
    }

    /// Total number of scalar parameters across all entries.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.fill(T::zero());
        }
    }

    /// Zeroes the gradients of trainable entries only.
    pub fn zero_trainable_grads(&mut self) {
        for e in self.entries.values_mut().filter(|e| e.trainable) {
            e.grad.fill(T::zero());
        }
    }

    /// SHA-256 over names, shapes and little-endian value bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, e) in &self.entries {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            for d in e.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                h.update(v.to_f64().unwrap_or(f64::NAN).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Bitwise comparison of parameter values (gradients and buffers ignored).
    pub fn values_bitwise_eq(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_f64().map(f64::to_bits) == y.to_f64().map(f64::to_bits))
            })
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            value: e.value.cast(),
                            grad: e.grad.cast(),
                            velocity: e.velocity.cast(),
                            trainable: e.trainable,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// One SGD update over every trainable entry:
/// `g' = g + weight_decay·p`, `v = momentum·v + g'`, `p = p − lr·v`.
///
/// With `momentum == 0` the buffer is bypassed and the update is `p − lr·g'`.
/// Entries with `trainable == false` are not touched, including their buffers.
pub fn sgd_step<T: Scalar>(params: &mut ParamSet<T>, learning_rate: T, momentum: T, weight_decay: T) -> Result<()> {
    if !(learning_rate >= T::zero()) || !learning_rate.is_finite() {
        return Err(Error::config(format!("learning rate must be finite and non-negative, got {learning_rate}")));
    }
    if !(momentum >= T::zero()) || !weight_decay.is_finite() || !(weight_decay >= T::zero()) {
        return Err(Error::config("momentum and weight decay must be non-negative"));
    }
    let use_momentum = momentum != T::zero();
    for e in params.entries.values_mut().filter(|e| e.trainable) {
        let p = e.value.data_mut();
        let g = e.grad.data();
        if use_momentum {
            let v = e.velocity.data_mut();
            for i in 0..p.len() {
                let gi = g[i] + weight_decay * p[i];
                v[i] = momentum * v[i] + gi;
                p[i] = p[i] - learning_rate * v[i];
            }
        } else {
            for i in 0..p.len() {
                let gi = g[i] + weight_decay * p[i];
                p[i] = p[i] - learning_rate * gi;
            }
        }
    }
    Ok(())
}
