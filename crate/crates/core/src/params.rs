//! Named, grouped parameter storage shared by every learnable component.
//!
//! Components hold [`ParamId`]s; a forward pass binds the whole store onto a
//! fresh [`Tape`] and looks parameters up through [`Bindings`].

use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Which optimizer phase owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    Embedding,
    Operation,
    Alpha,
    Head,
    Projection,
    Output,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Embedding,
        ParamGroup::Operation,
        ParamGroup::Alpha,
        ParamGroup::Head,
        ParamGroup::Projection,
        ParamGroup::Output,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    /// Handles in store order, one per parameter.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bindings { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique within the store.
    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, group, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Records every parameter as a leaf; only groups accepted by `trainable` require grad.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(ParamGroup) -> bool) -> Bindings {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.value.clone(), trainable(e.group)))
            .collect();
        Bindings { vars }
    }

    /// Number of scalar values in `group`.
    pub fn group_size(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.value.len())
            .sum()
    }

    /// Hash of the exact bit patterns of every value in `group`.
    pub fn checksum(&self, group: ParamGroup) -> u64 {
        let mut h = DefaultHasher::new();
        for e in self.entries.iter().filter(|e| e.group == group) {
            e.name.hash(&mut h);
            for v in e.value.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Overwrites values from `entries` by name. Every named parameter must
    /// exist with the same group and shape, and every store entry must be covered.
    pub fn load(&mut self, entries: &[ParamEntry]) -> Result<()> {
        if entries.len() != self.entries.len() {
            return Err(Error::invalid(format!(
                "parameter payload has {} entries, model expects {}",
                entries.len(),
                self.entries.len()
            )));
        }
        for src in entries {
            let id = self
                .find(&src.name)
                .ok_or_else(|| Error::invalid(format!("unknown parameter {}", src.name)))?;
            let dst = &mut self.entries[id.0];
            if dst.group != src.group || dst.value.shape() != src.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load parameters",
                    left: dst.value.shape().to_vec(),
                    right: src.value.shape().to_vec(),
                });
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}
