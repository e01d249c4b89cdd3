use std::collections::BTreeMap;

use super::{NumericsError, Scalar, Tensor};

/// Named parameter tensors in a deterministic (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f64> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, NumericsError> {
        self.map
            .get(name)
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, NumericsError> {
        self.map
            .get_mut(name)
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Keeps only the entries whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> Self {
        Self {
            map: self
                .map
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Inserts or overwrites every entry of `other`.
    pub fn merge(&mut self, other: &Self) {
        for (k, v) in &other.map {
            self.map.insert(k.clone(), v.clone());
        }
    }

    /// True when both stores hold the same names with the same shapes.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.map.len() == other.map.len()
            && self
                .map
                .iter()
                .zip(&other.map)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }
}
