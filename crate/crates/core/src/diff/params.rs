//! Named trainable-parameter storage.

use std::collections::BTreeMap;

use super::{DiffError, Tensor};

/// Ordered name -> tensor map. Iteration follows insertion order so that
/// whole-store reductions (gradient norms, optimizer sweeps) are deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique; the grad slot is allocated
    /// immediately.
    pub fn insert(&mut self, name: &str, mut tensor: Tensor) -> Result<usize, DiffError> {
        if self.index.contains_key(name) {
            return Err(DiffError::DuplicateParam(name.to_string()));
        }
        tensor.ensure_grad();
        let idx = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.index.insert(name.to_string(), idx);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let idx = self.index_of(name)?;
        Some(&mut self.tensors[idx])
    }

    pub fn by_index(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn by_index_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    /// Insertion-ordered iteration over (name, tensor).
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    pub fn accumulate_grad(&mut self, idx: usize, grad: &[f64]) {
        let slot = self.tensors[idx].grad_mut();
        debug_assert_eq!(slot.len(), grad.len());
        for (s, g) in slot.iter_mut().zip(grad) {
            *s += g;
        }
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_values_with_prefix(&mut self, prefix: &str) {
        for (name, tensor) in self.names.iter().zip(self.tensors.iter_mut()) {
            if name.starts_with(prefix) {
                tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> f64 {
        let mut sum = 0.0;
        for t in &self.tensors {
            if let Some(g) = t.grad() {
                for v in g {
                    sum += v * v;
                }
            }
        }
        sum.sqrt()
    }

    /// Multiplies every gradient by `scale`.
    pub fn scale_grads(&mut self, scale: f64) {
        for t in &mut self.tensors {
            t.grad_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
}
