//! Named parameter registry and the per-forward binding of parameters onto
//! a tape.

use crate::autograd::{BatchStats, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Stable handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Registration order of the parameter.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable weight; trainable unless frozen.
    Weight,
    /// Non-learnable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
}

/// Every tensor of a model, each registered exactly once under a unique name.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    fn add(&mut self, name: &str, kind: ParamKind, mut tensor: Tensor<T>) -> ParamId {
        assert!(self.find(name).is_none(), "parameter {name} registered twice");
        tensor.set_requires_grad(kind == ParamKind::Weight);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            kind,
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_weight(&mut self, name: &str, tensor: Tensor<T>) -> ParamId {
        self.add(name, ParamKind::Weight, tensor)
    }

    pub fn add_buffer(&mut self, name: &str, tensor: Tensor<T>) -> ParamId {
        self.add(name, ParamKind::Buffer, tensor)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of scalar weights (buffers excluded).
    pub fn num_weights(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Weight)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Number of scalar weights that currently receive gradients.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.tensor.requires_grad())
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.get(id).requires_grad()
    }

    /// Freezes or unfreezes a weight. Buffers can never be trainable.
    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        let e = &mut self.entries[id.0];
        e.tensor.set_requires_grad(on && e.kind == ParamKind::Weight);
    }

    /// Marks exactly the weights whose name satisfies `keep` as trainable.
    pub fn train_only(&mut self, keep: impl Fn(&str) -> bool) {
        for i in 0..self.entries.len() {
            let on = keep(&self.entries[i].name);
            self.set_trainable(ParamId(i), on);
        }
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    tensor: e.tensor.cast(),
                })
                .collect(),
        }
    }

    /// Replaces tensor values by name; every entry must be supplied with a
    /// matching shape.
    pub fn load_values(&mut self, named: &[(String, Tensor<T>)]) -> Result<()> {
        for e in &mut self.entries {
            let (_, t) = named
                .iter()
                .find(|(n, _)| *n == e.name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks tensor {}", e.name)))?;
            if t.shape() != e.tensor.shape() {
                return Err(dim_err!(
                    "tensor {}: checkpoint shape {:?}, model shape {:?}",
                    e.name,
                    t.shape(),
                    e.tensor.shape()
                ));
            }
            e.tensor.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

/// Momentum of batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

struct BnUpdate<T> {
    mean: ParamId,
    var: ParamId,
    stats: BatchStats<T>,
}

/// A tape plus the parameters bound onto it for one forward pass.
///
/// Parameters are copied onto the tape lazily on first use. Trainable
/// parameters become differentiable leaves unless the pass is frozen.
/// Side effects (gradients, running statistics) are collected and applied
/// to the store only through [`Forward::finish`].
pub struct Forward<'a, T: Scalar> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    track_grads: bool,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self::with_tape(store, Tape::new(), true)
    }

    /// A pass in which no parameter is differentiable.
    pub fn frozen(store: &'a ParamStore<T>) -> Self {
        Self::with_tape(store, Tape::new(), false)
    }

    pub fn with_tape(store: &'a ParamStore<T>, tape: Tape<T>, track_grads: bool) -> Self {
        Self {
            tape,
            store,
            bound: vec![None; store.len()],
            track_grads,
            bn_updates: Vec::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id);
        let v = if self.track_grads {
            self.tape.leaf(t)
        } else {
            self.tape.constant(t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Binds `id` to an existing tape variable instead of a copy of the
    /// stored tensor (used to differentiate through a single parameter).
    pub fn bind_param(&mut self, id: ParamId, var: Var) -> Result<()> {
        if self.tape.shape(var) != self.store.get(id).shape() {
            return Err(dim_err!(
                "binding {:?} to a variable of shape {:?}",
                self.store.entry(id).name,
                self.tape.shape(var)
            ));
        }
        self.bound[id.0] = Some(var);
        Ok(())
    }

    pub(crate) fn record_batch_stats(&mut self, mean: ParamId, var: ParamId, stats: BatchStats<T>) {
        self.bn_updates.push(BnUpdate { mean, var, stats });
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Consumes the pass, returning the gradients of every bound trainable
    /// parameter and the pending running-statistics updates.
    pub fn finish(self) -> PassEffects<T> {
        let grads = self
            .bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.tape.grad(v).map(|g| (ParamId(i), g.to_vec()))
            })
            .collect();
        PassEffects {
            grads,
            bn_updates: self.bn_updates,
        }
    }
}

/// Deferred side effects of a forward/backward pass.
pub struct PassEffects<T> {
    grads: Vec<(ParamId, Vec<T>)>,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<T: Scalar> PassEffects<T> {
    pub fn grad(&self, id: ParamId) -> Option<&[T]> {
        self.grads.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }

    /// Gradients of every parameter that received one in this pass.
    pub fn grads(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.grads.iter().map(|(p, g)| (*p, g.as_slice()))
    }

    /// Adds the collected gradients into the store's gradient buffers.
    pub fn accumulate_grads(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (id, g) in &self.grads {
            store.get_mut(*id).accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Folds batch statistics into running averages (unbiased variance).
    pub fn update_running_stats(&self, store: &mut ParamStore<T>) {
        let m = T::of(BN_MOMENTUM);
        for u in &self.bn_updates {
            let n = u.stats.count as f64;
            let unbias = T::of(n / (n - 1.0).max(1.0));
            for (r, &b) in store.get_mut(u.mean).data_mut().iter_mut().zip(&u.stats.mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            for (r, &b) in store.get_mut(u.var).data_mut().iter_mut().zip(&u.stats.var) {
                *r = (T::one() - m) * *r + m * b * unbias;
            }
        }
    }

    pub fn apply(&self, store: &mut ParamStore<T>) -> Result<()> {
        self.accumulate_grads(store)?;
        self.update_running_stats(store);
        Ok(())
    }
}
