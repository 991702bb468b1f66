//! Named parameter storage and per-forward binding into a [`Graph`].

use std::ops::{Deref, DerefMut};
use std::path::Path;
use std::sync::Arc;

use numcore::{checkpoint, Grads, Graph, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer group; the two groups get separate learning rates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Backbone,
    Transformer,
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub name: String,
    pub value: Arc<Tensor>,
    pub group: Group,
    pub trainable: bool,
    /// Whether decoupled weight decay applies (matrices, not biases or norms).
    pub decay: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: Group, decay: bool) -> ParamId {
        self.entries.push(Entry {
            name: name.into(),
            value: Arc::new(value),
            group,
            trainable: true,
            decay,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &Entry {
        &self.entries[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(contract(format!(
                "{}: shape {:?} does not match {:?}",
                e.name,
                value.shape(),
                e.value.shape()
            )));
        }
        e.value = Arc::new(value);
        Ok(())
    }

    /// Mutable access to a parameter's values, copying only if a graph still
    /// shares them.
    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        Arc::make_mut(&mut self.entries[id.0].value).data_mut()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total number of scalars over all registered tensors.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn zero_all(&mut self) {
        for id in self.ids().collect::<Vec<_>>() {
            self.values_mut(id).fill(0.0);
        }
    }

    pub fn records(&self) -> Vec<(&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &*e.value)).collect()
    }

    /// Overwrites every parameter from `(name, tensor)` records; all names
    /// must be present with matching shapes.
    pub fn load_records(&mut self, records: &[(String, Tensor)]) -> Result<()> {
        for id in self.ids().collect::<Vec<_>>() {
            let name = &self.entries[id.0].name;
            let (_, t) = records
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| contract(format!("checkpoint lacks parameter {name}")))?;
            self.set(id, t.clone())?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(checkpoint::save(path, &self.records())?)
    }
}

/// Weight initialisers.
pub mod init {
    use super::*;

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-a..a))
    }

    /// Normal with deviation `sqrt(2 / fan_in)`, for layers followed by ReLU.
    pub fn he(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
        normal(shape, (2.0 / fan_in as f64).sqrt(), rng)
    }

    pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
        let d = Normal::new(0.0, std).expect("finite deviation");
        Tensor::from_fn(shape.to_vec(), |_| d.sample(rng))
    }
}

/// A graph being built against a parameter store. Parameters are bound on
/// first use; frozen ones enter as constants.
pub struct Session<'s> {
    pub graph: Graph,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    grad_enabled: bool,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            grad_enabled: true,
        }
    }

    /// A session in which every parameter is a constant.
    pub fn inference(store: &'s ParamStore) -> Self {
        Self {
            grad_enabled: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let e = &self.store.entries[id.0];
        let v = if self.grad_enabled && e.trainable {
            self.graph.param(e.value.clone())
        } else {
            self.graph.constant_arc(e.value.clone())
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradient of every bound, trainable parameter.
    pub fn param_grads(&self, grads: &mut Grads) -> Vec<(ParamId, Vec<f64>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.graph.requires_grad(v).then(|| {
                    (
                        ParamId(i),
                        grads.take(v).unwrap_or_else(|| vec![0.0; self.graph.value(v).numel()]),
                    )
                })
            })
            .collect()
    }
}

impl Deref for Session<'_> {
    type Target = Graph;

    fn deref(&self) -> &Graph {
        &self.graph
    }
}

impl DerefMut for Session<'_> {
    fn deref_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }
}

/// Largest relative discrepancy `|analytic − numeric| / max(1, |analytic|)`
/// between the tape gradient of the scalar built by `f` and central
/// differences, over parameters `ids`. At most `max_coords` coordinates of
/// each parameter are probed, spread evenly over it.
pub fn param_grad_check(
    store: &mut ParamStore,
    ids: &[ParamId],
    f: impl Fn(&mut Session) -> Result<Var>,
    eps: f64,
    max_coords: usize,
) -> Result<f64> {
    let analytic = {
        let mut s = Session::new(store);
        for &id in ids {
            s.p(id);
        }
        let out = f(&mut s)?;
        if s.value(out).numel() != 1 {
            return Err(contract("gradient check needs a scalar function"));
        }
        let mut grads = s.backward(out)?;
        s.param_grads(&mut grads)
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut s = Session::inference(store);
        let out = f(&mut s)?;
        Ok(s.value(out).item())
    };
    let mut worst = 0.0f64;
    for &id in ids {
        let n = store.value(id).numel();
        let a = analytic
            .iter()
            .find(|(i, _)| *i == id)
            .map(|(_, g)| g.clone())
            .ok_or_else(|| contract(format!("parameter {} is frozen or unused", store.entry(id).name)))?;
        let step = n.div_ceil(max_coords.max(1));
        for i in (0..n).step_by(step) {
            let orig = store.value(id).data()[i];
            store.values_mut(id)[i] = orig + eps;
            let plus = eval(store)?;
            store.values_mut(id)[i] = orig - eps;
            let minus = eval(store)?;
            store.values_mut(id)[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max((a[i] - numeric).abs() / a[i].abs().max(1.0));
        }
    }
    Ok(worst)
}
