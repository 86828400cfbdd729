use std::collections::HashMap;

use super::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Learned by the optimizer.
    Weight,
    /// Running statistics, updated by forward passes in training mode.
    Buffer,
}

#[derive(Debug, Clone)]
struct Entry<F> {
    name: String,
    value: Tensor<F>,
    kind: ParamKind,
    frozen: bool,
}

/// Named parameter and buffer storage shared by every network of a model.
#[derive(Debug, Clone, Default)]
pub struct VarStore<F> {
    entries: Vec<Entry<F>>,
    by_name: HashMap<String, ParamId>,
}

impl<F: Real> VarStore<F> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value,
            kind,
            frozen: false,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<F>) {
        let e = &mut self.entries[id.0];
        assert_eq!(e.value.shape(), value.shape(), "shape change for {}", e.name);
        e.value = value;
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Whether the optimizer should receive a gradient for `id`.
    pub fn is_trainable(&self, id: ParamId) -> bool {
        let e = &self.entries[id.0];
        e.kind == ParamKind::Weight && !e.frozen
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    /// Freezes or unfreezes every entry whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.frozen = frozen;
            }
        }
    }

    pub fn unfreeze_all(&mut self) {
        for e in &mut self.entries {
            e.frozen = false;
        }
    }

    /// Number of learnable scalars whose name starts with `prefix`.
    pub fn weight_count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Weight && e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }

    /// Same layout with values converted to another scalar type.
    pub fn cast<G: Real>(&self) -> VarStore<G> {
        VarStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    kind: e.kind,
                    frozen: e.frozen,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}
