use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::Gradients;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor with a gradient slot.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    path: String,
    value: Arc<Tensor<T>>,
    grad: Option<Tensor<T>>,
}

impl<T: Scalar> Parameter<T> {
    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub(crate) fn shared_value(&self) -> &Arc<Tensor<T>> {
        &self.value
    }

    /// Mutable access; copies the data first if a live tape still shares it.
    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.value)
    }

    pub fn grad(&self) -> Option<&Tensor<T>> {
        self.grad.as_ref()
    }

    pub fn scale_grad(&mut self, factor: T) {
        if let Some(g) = &mut self.grad {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// All parameters of one model, addressed by unique hierarchical paths.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_path: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_path: HashMap::new(),
        }
    }

    /// Registers a parameter. Paths must be unique.
    pub fn insert(&mut self, path: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let path = path.into();
        if self.by_path.contains_key(&path) {
            return Err(Error::config(format!("duplicate parameter path {path}")));
        }
        let id = ParamId(self.params.len());
        self.by_path.insert(path.clone(), id);
        self.params.push(Parameter {
            path,
            value: Arc::new(value),
            grad: None,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, path: &str) -> Option<ParamId> {
        self.by_path.get(path).copied()
    }

    pub fn by_path(&self, path: &str) -> Option<&Parameter<T>> {
        self.id(path).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    /// Scalar count of every parameter whose path starts with `prefix`.
    pub fn numel_under(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| path_has_prefix(&p.path, prefix))
            .map(Parameter::numel)
            .sum()
    }

    /// Stores the result of a backward pass: every parameter gets a
    /// gradient, zero-filled when the root did not depend on it.
    pub fn assign_grads(&mut self, grads: &Gradients<T>) {
        for (i, p) in self.params.iter_mut().enumerate() {
            p.grad = Some(match grads.param(ParamId(i)) {
                Some(g) => g.clone(),
                None => Tensor::zeros_like(&p.value),
            });
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Replaces a value, keeping the shape contract.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {}: shape {} cannot take {}",
                p.path,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    /// Zeroes every parameter whose path starts with `prefix`. Returns how
    /// many tensors were touched.
    pub fn zero_under(&mut self, prefix: &str) -> usize {
        let mut touched = 0;
        for p in &mut self.params {
            if path_has_prefix(&p.path, prefix) {
                let v = Arc::make_mut(&mut p.value);
                v.data_mut().iter_mut().for_each(|x| *x = T::zero());
                touched += 1;
            }
        }
        touched
    }

    /// Fills every parameter whose path starts with `prefix` with `value`.
    pub fn fill_under(&mut self, prefix: &str, value: T) -> usize {
        let mut touched = 0;
        for p in &mut self.params {
            if path_has_prefix(&p.path, prefix) {
                let v = Arc::make_mut(&mut p.value);
                v.data_mut().iter_mut().for_each(|x| *x = value);
                touched += 1;
            }
        }
        touched
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.path.as_str())
    }
}

/// `a.b.c` has prefixes `a`, `a.b`, `a.b.c`; `ab` is not a prefix of `abc.d`.
pub fn path_has_prefix(path: &str, prefix: &str) -> bool {
    if prefix.is_empty() {
        return true;
    }
    path == prefix
        || (path.starts_with(prefix) && path.as_bytes().get(prefix.len()) == Some(&b'.'))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_paths_are_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.insert("a.w", Tensor::zeros(&[2]).unwrap()).unwrap();
        assert!(store.insert("a.w", Tensor::zeros(&[2]).unwrap()).is_err());
    }

    #[test]
    fn prefix_matching_respects_segments() {
        assert!(path_has_prefix("row0.col1.w", "row0"));
        assert!(path_has_prefix("row0.col1.w", "row0.col1.w"));
        assert!(!path_has_prefix("row01.w", "row0"));
        assert!(path_has_prefix("anything", ""));
    }

    #[test]
    fn numel_under_sums_subtree() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a.x", Tensor::zeros(&[3]).unwrap()).unwrap();
        store.insert("a.y", Tensor::zeros(&[2, 2]).unwrap()).unwrap();
        store.insert("b.x", Tensor::zeros(&[5]).unwrap()).unwrap();
        assert_eq!(store.numel_under("a"), 7);
        assert_eq!(store.numel(), 12);
    }
}
