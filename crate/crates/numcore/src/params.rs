use std::collections::BTreeMap;

use crate::error::{NumError, Result};
use crate::tensor::Tensor;

/// Handle to a tensor held in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors, kept in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor under a unique name.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NumError::Invalid { op: "param", msg: format!("duplicate name `{name}`") });
        }
        let id = ParamId(self.values.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    /// Ids whose name starts with `prefix`, in insertion order.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.ids().filter(|&id| self.names[id.0].starts_with(prefix)).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Overwrites every tensor whose name appears in `entries`.
    ///
    /// Names must exist and shapes must agree.
    pub fn load_entries(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in entries {
            let id = self.id(name).ok_or_else(|| NumError::UnknownParam(name.clone()))?;
            let cur = &mut self.values[id.0];
            if cur.shape() != t.shape() {
                return Err(NumError::ShapeMismatch {
                    op: "load",
                    lhs: cur.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            *cur = t.clone();
        }
        Ok(())
    }

    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        self.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }
}
