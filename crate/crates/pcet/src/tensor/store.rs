//! Named parameter storage and the Adam optimizer.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::graph::Gradients;
use crate::tensor::Tensor;

/// Stable handle to one parameter tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub(crate) fn index(self) -> usize {
        self.0
    }
}

struct Entry {
    name: String,
    value: Tensor,
}

/// Flat registry of named parameters. Registration order is stable, which
/// makes checkpoints and optimizer state deterministic.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    /// Register a parameter under a unique dotted name (for example
    /// `backbone.stage0.mlp0.weight`).
    pub fn register(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.to_string(), id.0);
        self.entries.push(Entry {
            name: name.to_string(),
            value,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Iterate `(name, tensor)` in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Overwrite one parameter (shapes must match).
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if !self.entries[id.0].value.same_shape(&value) {
            return Err(Error::invalid(format!(
                "parameter `{}` shape {:?} cannot be replaced by {:?}",
                self.entries[id.0].name,
                self.entries[id.0].value.shape(),
                value.shape()
            )));
        }
        self.entries[id.0].value = value;
        Ok(())
    }

    /// Load values for every parameter from `(name, tensor)` pairs. The
    /// name sets must match exactly and shapes must agree.
    pub fn load_named(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(Error::invalid(format!(
                "checkpoint holds {} tensors, model expects {}",
                tensors.len(),
                self.entries.len()
            )));
        }
        for (name, value) in tensors {
            let Some(&idx) = self.by_name.get(name) else {
                return Err(Error::invalid(format!(
                    "checkpoint tensor `{name}` has no matching parameter"
                )));
            };
            self.set_value(ParamId(idx), value.clone())?;
        }
        Ok(())
    }

    /// Snapshot all parameters as `(name, tensor)` pairs in registration
    /// order.
    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect()
    }
}

/// First/second moment estimates for Adam, aligned with a store's
/// registration order, plus the shared step counter.
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Fresh state (zero moments) for every parameter in the store, with
    /// the conventional beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new(store: &ParamStore) -> AdamState {
        AdamState {
            m: store
                .entries
                .iter()
                .map(|e| Tensor::zeros(e.value.rows(), e.value.cols()))
                .collect(),
            v: store
                .entries
                .iter()
                .map(|e| Tensor::zeros(e.value.rows(), e.value.cols()))
                .collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over every parameter that (a) received a gradient and
/// (b) passes the `trainable` name filter. Parameters outside both stay
/// bit-identical. Returns a numeric error if an update produces a
/// non-finite value.
pub fn adam_step(
    store: &mut ParamStore,
    state: &mut AdamState,
    grads: &Gradients,
    lr: f64,
    trainable: impl Fn(&str) -> bool,
) -> Result<()> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - state.beta1.powi(t as i32);
    let bc2 = 1.0 - state.beta2.powi(t as i32);
    for idx in 0..store.entries.len() {
        if !trainable(&store.entries[idx].name) {
            continue;
        }
        let Some(g) = grads.param(ParamId(idx)) else {
            continue;
        };
        let entry = &mut store.entries[idx];
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for k in 0..entry.value.numel() {
            let gk = g.data()[k];
            let mk = state.beta1 * m.data()[k] + (1.0 - state.beta1) * gk;
            let vk = state.beta2 * v.data()[k] + (1.0 - state.beta2) * gk * gk;
            m.data_mut()[k] = mk;
            v.data_mut()[k] = vk;
            let update = lr * (mk / bc1) / ((vk / bc2).sqrt() + state.eps);
            entry.value.data_mut()[k] -= update;
        }
        if !entry.value.all_finite() {
            return Err(Error::Numeric(format!(
                "adam update produced non-finite values in `{}`",
                entry.name
            )));
        }
    }
    Ok(())
}
