use std::collections::BTreeMap;

use crate::error::{invalid, Error, Result};
use crate::tensor::{Float, Tensor};

/// Ordered collection of named parameter tensors.
///
/// Indices are stable: growing a model only appends.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(invalid!("duplicate parameter name `{name}`"));
        }
        let idx = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), idx);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Tensor<T> {
        &self.values[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.values[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::all_finite)
    }

    /// Copy values for every name present in `other` (shapes must agree).
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (name, t) in other.iter() {
            let idx = self
                .find(name)
                .ok_or_else(|| Error::Mismatch(format!("missing parameter `{name}`")))?;
            if self.values[idx].shape() != t.shape() {
                return Err(Error::Mismatch(format!(
                    "parameter `{name}` shape {:?} vs {:?}",
                    self.values[idx].shape(),
                    t.shape()
                )));
            }
            self.values[idx] = t.clone();
        }
        Ok(())
    }

    /// Same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamStore<T>) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.shape() == b.shape())
    }
}
