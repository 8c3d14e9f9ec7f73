use std::collections::{BTreeMap, HashMap};

use super::dense::Tensor;
use super::real::Real;
use crate::error::{Error, Result};

/// Index of a named parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Index of a physical storage slot. Aliased parameters share one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StorageId(pub(crate) usize);

/// A named view onto a storage slot.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub storage: StorageId,
    /// Parameters with the same handle alias the same storage.
    pub shared_handle: Option<String>,
}

#[derive(Clone, Debug)]
pub(crate) struct Slot<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Gradients for parameter storages produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads<T> {
    pub(crate) entries: Vec<(StorageId, Vec<T>)>,
}

impl<T: Real> ParamGrads<T> {
    pub fn get(&self, storage: StorageId) -> Option<&[T]> {
        self.entries
            .iter()
            .find(|(s, _)| *s == storage)
            .map(|(_, g)| g.as_slice())
    }

    /// Elementwise sum of several gradient sets, folded in the given order.
    pub fn sum(parts: Vec<ParamGrads<T>>) -> ParamGrads<T> {
        let mut acc: BTreeMap<StorageId, Vec<T>> = BTreeMap::new();
        for part in parts {
            for (s, g) in part.entries {
                match acc.get_mut(&s) {
                    Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += *y),
                    None => {
                        acc.insert(s, g);
                    }
                }
            }
        }
        ParamGrads {
            entries: acc.into_iter().collect(),
        }
    }

    pub fn scale(&mut self, c: T) {
        for (_, g) in &mut self.entries {
            g.iter_mut().for_each(|v| *v *= c);
        }
    }
}

/// Owns every parameter of one or more networks.
///
/// Names are unique. Aliasing repoints a parameter at another parameter's
/// storage, so both names observe the same elements and accumulate into the
/// same gradient.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter>,
    slots: Vec<Slot<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            slots: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let storage = StorageId(self.slots.len());
        let grad = Tensor::zeros(value.shape());
        self.slots.push(Slot { value, grad });
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.clone(),
            storage,
            shared_handle: None,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    /// Makes `alias` observe the storage of `source` under `handle`.
    pub fn alias(&mut self, alias: ParamId, source: ParamId, handle: &str) -> Result<()> {
        let src_storage = self.params[source.0].storage;
        let old = self.params[alias.0].storage;
        if self.slots[old.0].value.shape() != self.slots[src_storage.0].value.shape() {
            return Err(Error::dim(
                "alias",
                format!(
                    "`{}` {:?} vs `{}` {:?}",
                    self.params[alias.0].name,
                    self.slots[old.0].value.shape(),
                    self.params[source.0].name,
                    self.slots[src_storage.0].value.shape()
                ),
            ));
        }
        self.params[alias.0].storage = src_storage;
        self.params[alias.0].shared_handle = Some(handle.to_string());
        self.params[source.0].shared_handle = Some(handle.to_string());
        Ok(())
    }

    /// Breaks an alias by giving `id` a private copy of its current storage.
    /// Used by tests that inject tying faults.
    pub fn detach(&mut self, id: ParamId) {
        let slot = self.slots[self.params[id.0].storage.0].clone();
        let storage = StorageId(self.slots.len());
        self.slots.push(slot);
        self.params[id.0].storage = storage;
        self.params[id.0].shared_handle = None;
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn storage(&self, id: ParamId) -> StorageId {
        self.params[id.0].storage
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[self.params[id.0].storage.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        let s = self.params[id.0].storage.0;
        &mut self.slots[s].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[self.params[id.0].storage.0].grad
    }

    pub(crate) fn storage_value(&self, s: StorageId) -> &Tensor<T> {
        &self.slots[s.0].value
    }

    pub(crate) fn slot_mut(&mut self, s: StorageId) -> &mut Slot<T> {
        &mut self.slots[s.0]
    }

    /// Storages referenced by at least one parameter, in first-reference order.
    pub fn live_storages(&self) -> Vec<StorageId> {
        let mut seen = vec![false; self.slots.len()];
        let mut out = Vec::new();
        for p in &self.params {
            if !seen[p.storage.0] {
                seen[p.storage.0] = true;
                out.push(p.storage);
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for slot in &mut self.slots {
            slot.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds a backward pass's gradients into the stored accumulators.
    pub fn accumulate(&mut self, grads: &ParamGrads<T>) {
        for (s, g) in &grads.entries {
            let slot = &mut self.slots[s.0];
            for (a, b) in slot.grad.data_mut().iter_mut().zip(g) {
                *a += *b;
            }
        }
    }

    /// Name → value copy of every parameter; aliases appear under each name.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), self.slots[p.storage.0].value.clone()))
            .collect()
    }

    /// Names whose value differs bitwise between two snapshots.
    pub fn changed_names(
        before: &BTreeMap<String, Tensor<T>>,
        after: &BTreeMap<String, Tensor<T>>,
    ) -> Vec<String> {
        before
            .iter()
            .filter(|(name, v)| after.get(*name).map_or(true, |w| !v.bit_eq(w)))
            .map(|(name, _)| name.clone())
            .collect()
    }

    pub fn count_elements(&self) -> usize {
        self.live_storages()
            .iter()
            .map(|s| self.slots[s.0].value.numel())
            .sum()
    }

    /// Stable content hash over parameter names, aliasing and element bits.
    pub fn content_hash(&self, prefix: &str) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            h.update(p.name.as_bytes());
            h.update(p.shared_handle.as_deref().unwrap_or("").as_bytes());
            let mut bytes = Vec::new();
            for v in self.slots[p.storage.0].value.data() {
                v.extend_le_bytes(&mut bytes);
            }
            h.update(&bytes);
        }
        hex::encode(h.finalize())
    }
}
