use std::path::Path;

use crate::tensor::{checkpoint, Tensor};

use super::ModelError;

/// Which phase a weight belongs to: θ_AS or θ_TT.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Acoustic,
    Decoder,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<Self> {
        if name.starts_with("as.") {
            Some(Self::Acoustic)
        } else if name.starts_with("tt.") {
            Some(Self::Decoder)
        } else {
            None
        }
    }
}

/// All learnable weights, in a fixed order. Names starting with `as.` form
/// θ_AS and names starting with `tt.` form θ_TT.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub(crate) fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, name: String, value: Tensor) -> usize {
        debug_assert!(ParamGroup::of(&name).is_some(), "{name}");
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn group(&self, id: usize) -> ParamGroup {
        ParamGroup::of(&self.names[id]).expect("validated on insert")
    }

    pub fn value(&self, id: usize) -> &Tensor {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn ids_in(&self, group: ParamGroup) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&i| self.group(i) == group)
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }

    /// Replaces every value from `entries`, which must carry exactly this
    /// store's names and shapes (in any order).
    pub fn load_entries(&mut self, entries: &[(String, Tensor)]) -> Result<(), ModelError> {
        if entries.len() != self.len() {
            return Err(ModelError::Mismatch(format!(
                "checkpoint has {} tensors, model has {}",
                entries.len(),
                self.len()
            )));
        }
        let mut fresh = self.values.clone();
        let mut seen = vec![false; self.len()];
        for (name, t) in entries {
            let id = self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| ModelError::Mismatch(format!("unknown tensor `{name}`")))?;
            if self.values[id].shape() != t.shape() {
                return Err(ModelError::Mismatch(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    self.values[id].shape()
                )));
            }
            if std::mem::replace(&mut seen[id], true) {
                return Err(ModelError::Mismatch(format!("duplicate tensor `{name}`")));
            }
            fresh[id] = t.clone();
        }
        self.values = fresh;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        Ok(checkpoint::save(path, &self.to_entries())?)
    }

    pub fn load_into(&mut self, path: &Path) -> Result<(), ModelError> {
        let entries = checkpoint::load(path)?;
        self.load_entries(&entries)
    }

    /// True when every weight in `group` is bit-identical in both stores.
    pub fn group_bits_equal(&self, other: &Self, group: ParamGroup) -> bool {
        self.ids_in(group).all(|i| {
            let (a, b) = (self.values[i].data(), other.values[i].data());
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        })
    }
}
