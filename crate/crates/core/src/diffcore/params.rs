//! Named, ordered parameter collections.

use super::{Bindings, Tensor};
use crate::error::{KklError, Result};
use crate::scalar::Scalar;

/// Ordered list of named tensors. Order is insertion order and fixes the
/// layout used by optimizers and checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<S>) {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn extend(&mut self, other: ParamSet<S>) {
        for (n, t) in other.names.into_iter().zip(other.tensors) {
            self.push(n, t);
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn take(&self, name: &str) -> Result<Tensor<S>> {
        self.get(name)
            .cloned()
            .ok_or_else(|| KklError::Config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn to_bindings(&self) -> Bindings<S> {
        self.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }
}
