//! Named parameter collection shared by the model, the optimizer, the
//! gradient checker and the checkpoint codec. Insertion order is preserved so
//! every traversal (updates, serialization, reporting) is deterministic.

use indexmap::IndexMap;

use super::scalar::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    /// Frozen parameters are bound into graphs without gradient tracking and
    /// skipped by the optimizer.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    items: IndexMap<String, Param<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            items: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) {
        let name = name.into();
        let prev = self.items.insert(name.clone(), Param { value, trainable });
        assert!(prev.is_none(), "duplicate parameter `{name}`");
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.items
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.items
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    /// Mark an existing parameter as frozen.
    pub fn freeze(&mut self, name: &str) -> Result<()> {
        self.items
            .get_mut(name)
            .map(|p| p.trainable = false)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    /// Freeze every parameter whose name starts with `prefix`; returns how
    /// many matched.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for (name, p) in self.items.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = false;
                n += 1;
            }
        }
        n
    }

    pub fn contains(&self, name: &str) -> bool {
        self.items.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.items.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.items.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.items
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn total_elements(&self) -> usize {
        self.items.values().map(|p| p.value.len()).sum()
    }
}
