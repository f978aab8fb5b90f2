use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered, named collection of parameter tensors.
///
/// Models keep the index returned by [`ParamStore::push`] for each tensor
/// and look their leaves up in the `Vec<Var>` produced by
/// [`ParamStore::bind`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Every tensor as a differentiable leaf, in store order.
    pub fn bind<'g>(&self, g: &'g Graph) -> Vec<Var<'g>> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Every tensor as a constant leaf (inference).
    pub fn bind_const<'g>(&self, g: &'g Graph) -> Vec<Var<'g>> {
        self.tensors.iter().map(|t| g.constant(t.clone())).collect()
    }

    /// Replaces tensors by name from `(name, tensor)` pairs; every name in
    /// this store must be present with a matching shape.
    pub fn load_from<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        let map: std::collections::HashMap<&str, &Tensor> = entries.into_iter().collect();
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let t = map
                .get(name.as_str())
                .ok_or_else(|| Error::data(format!("missing tensor `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(Error::shape("load_params", slot.shape(), t.shape()));
            }
            *slot = (*t).clone();
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}
