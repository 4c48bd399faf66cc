use std::collections::HashMap;

use super::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named tensor with its accumulated gradient.
///
/// Non-trainable entries (batch-norm running statistics) live in the same
/// store so they travel with checkpoints, but optimizers and the L2 term skip them.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(
        &mut self,
        name: &str,
        value: Tensor,
        trainable: bool,
    ) -> Result<ParamId, TensorError> {
        if self.by_name.contains_key(name) {
            return Err(TensorError::DuplicateName(name.to_string()));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId, TensorError> {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> Result<ParamId, TensorError> {
        self.insert(name, value, false)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total element count, buffers included.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `grads` into every parameter's `grad`.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (p, g) in self.params.iter_mut().zip(&grads.slots) {
            if let Some(g) = g {
                p.grad.add_assign(g);
            }
        }
    }

    /// `λ·Σθ²` over trainable parameters.
    pub fn l2_penalty(&self, lambda: f64) -> f64 {
        lambda
            * self
                .params
                .iter()
                .filter(|p| p.trainable)
                .map(|p| p.value.sum_squares())
                .sum::<f64>()
    }

    /// Adds the gradient of [`Self::l2_penalty`], `2λθ`, into `grad`.
    pub fn add_l2_grad(&mut self, lambda: f64) {
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            for (g, v) in p.grad.data_mut().iter_mut().zip(p.value.data()) {
                *g += 2.0 * lambda * v;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn empty(n: usize) -> Self {
        Self {
            slots: vec![None; n],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    pub(crate) fn add_into(&mut self, id: ParamId, g: &Tensor) {
        match &mut self.slots[id.0] {
            Some(t) => t.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Adds `other` slot by slot. Order of calls fixes the floating-point result.
    pub fn merge(&mut self, other: &Gradients) {
        if self.slots.len() < other.slots.len() {
            self.slots.resize(other.slots.len(), None);
        }
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.add_into(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.slots.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(
            s.add("w", Tensor::zeros(&[2])),
            Err(TensorError::DuplicateName(_))
        ));
    }

    #[test]
    fn l2_penalty_and_gradient() {
        let mut s = ParamStore::new();
        let w = s.add("w", Tensor::vector(vec![1.0, -2.0])).unwrap();
        s.add_buffer("running", Tensor::vector(vec![100.0]))
            .unwrap();
        assert!((s.l2_penalty(1e-4) - 5e-4).abs() < 1e-18);
        s.add_l2_grad(1e-4);
        assert_eq!(s.get(w).grad.data(), &[2e-4, -4e-4]);
        assert_eq!(s.trainable_count(), 2);
        assert_eq!(s.count(), 3);
    }
}
