//! Named parameter storage shared by the model, optimizer and checkpoints.

use std::collections::{BTreeMap, HashMap};

use crate::grad::{Tape, Var};
use crate::norm::BnRunningStats;
use crate::tensor::{Precision, Tensor};

/// Ordered collection of named tensors. Order is insertion order and is part of
/// the model's identity (optimizer state and checkpoints follow it).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = value,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, value));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn to_precision(&self, precision: Precision) -> Self {
        let mut out = ParamStore::new();
        for (n, t) in self.iter() {
            out.insert(n, t.to_precision(precision));
        }
        out
    }

    /// Registers every tensor on `tape` as a named parameter.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), tape.param(n.clone(), t.clone())))
            .collect();
        Bound { vars }
    }
}

/// Tape handles of a bound [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn from_map(vars: HashMap<String, Var>) -> Self {
        Bound { vars }
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

/// Running batch-norm statistics keyed by `layer{i}.{term}`.
pub type BnStore = BTreeMap<String, BnRunningStats>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_is_kept() {
        let mut s = ParamStore::new();
        s.insert("b", Tensor::scalar(1.0, Precision::F64));
        s.insert("a", Tensor::scalar(2.0, Precision::F64));
        s.insert("b", Tensor::scalar(3.0, Precision::F64));
        assert_eq!(s.names().collect::<Vec<_>>(), vec!["b", "a"]);
        assert_eq!(s.get("b").unwrap().data(), &[3.0]);
        assert_eq!(s.scalar_count(), 2);
    }
}
