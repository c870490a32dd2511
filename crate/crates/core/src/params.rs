//! Named parameter registry with gradient buffers.

use std::collections::HashMap;
use std::ops::Range;

use crate::error::Error;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<S: Scalar> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Option<Tensor<S>>,
    pub trainable: bool,
    /// When set, only this row range is updated by the optimizer
    /// (used to train a slice of a shared table, e.g. item-id rows of
    /// a tied embedding).
    pub train_rows: Option<Range<usize>>,
}

/// All parameters of one model. Names are unique; registration order is
/// stable and defines checkpoint record order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S: Scalar = f64> {
    entries: Vec<ParamEntry<S>>,
    by_name: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn register(&mut self, name: &str, value: Tensor<S>) -> Result<ParamId, Error> {
        if self.by_name.contains_key(name) {
            return Err(Error::DuplicateParam { name: name.to_string() });
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.to_string(), id.0);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad: None,
            trainable: true,
            train_rows: None,
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId, Error> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParam { name: name.to_string() })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.entries[id.0].grad.as_ref()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn train_rows(&self, id: ParamId) -> Option<Range<usize>> {
        self.entries[id.0].train_rows.clone()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
        if !trainable {
            self.entries[id.0].train_rows = None;
        }
    }

    /// Mark only `rows` of a 2-d parameter as optimizer-updatable.
    pub fn set_train_rows(&mut self, id: ParamId, rows: Range<usize>) -> Result<(), Error> {
        let shape = self.entries[id.0].value.shape();
        if shape.len() != 2 || rows.end > shape[0] {
            return Err(Error::InvalidArg(format!(
                "train_rows {rows:?} does not fit parameter `{}` of shape {shape:?}",
                self.entries[id.0].name
            )));
        }
        self.entries[id.0].trainable = true;
        self.entries[id.0].train_rows = Some(rows);
        Ok(())
    }

    /// Set every parameter non-trainable; stages then opt in by prefix.
    pub fn freeze_all(&mut self) {
        for e in self.entries.iter_mut() {
            e.trainable = false;
            e.train_rows = None;
        }
    }

    pub fn set_trainable_by_prefix(&mut self, prefix: &str, trainable: bool) {
        for e in self.entries.iter_mut() {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
                if !trainable {
                    e.train_rows = None;
                }
            }
        }
    }

    /// Allocate zero gradient buffers for trainable parameters that do
    /// not have one yet.
    pub fn ensure_grads(&mut self) {
        for e in self.entries.iter_mut() {
            if e.trainable && e.grad.is_none() {
                e.grad = Some(Tensor::zeros(e.value.shape().to_vec()));
            }
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, contribution: &[S]) {
        let e = &mut self.entries[id.0];
        let g = e
            .grad
            .get_or_insert_with(|| Tensor::zeros(e.value.shape().to_vec()));
        for (dst, &src) in g.values_mut().iter_mut().zip(contribution) {
            *dst += src;
        }
    }

    /// Drop all gradient buffers (the per-step reset).
    pub fn clear_grads(&mut self) {
        for e in self.entries.iter_mut() {
            e.grad = None;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<S>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.trainable)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn n_trainable_values(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| match &e.train_rows {
                Some(r) => (r.end - r.start) * e.value.shape()[1],
                None => e.value.len(),
            })
            .sum()
    }

    /// Gradient map view keyed by parameter name.
    pub fn gradient_map(&self) -> Vec<(&str, &Tensor<S>)> {
        self.entries
            .iter()
            .filter_map(|e| e.grad.as_ref().map(|g| (e.name.as_str(), g)))
            .collect()
    }
}
