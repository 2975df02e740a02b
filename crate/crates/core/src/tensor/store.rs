use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Parameters are optimized; buffers (running statistics) are only saved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Parameter,
    Buffer,
}

#[derive(Clone)]
struct Entry {
    value: Tensor,
    trainable: bool,
    kind: EntryKind,
}

/// Named tensors addressed by dot-separated paths such as
/// `g_coarse.res3.branch_d2.sepconv.dw`.
#[derive(Clone, Default)]
pub struct ParameterStore {
    entries: BTreeMap<String, Entry>,
}

impl std::fmt::Debug for ParameterStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParameterStore")
            .field("entries", &self.entries.len())
            .field("params", &self.num_params(""))
            .finish()
    }
}

pub(crate) fn under(path: &str, prefix: &str) -> bool {
    prefix.is_empty()
        || path == prefix
        || (path.starts_with(prefix) && (prefix.ends_with('.') || path[prefix.len()..].starts_with('.')))
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, path: &str, value: Tensor, kind: EntryKind) -> Result<()> {
        if self.entries.contains_key(path) {
            return Err(Error::DuplicateParameter(path.to_string()));
        }
        self.entries.insert(
            path.to_string(),
            Entry {
                value,
                trainable: kind == EntryKind::Parameter,
                kind,
            },
        );
        Ok(())
    }

    pub fn insert_parameter(&mut self, path: &str, data: Vec<f64>, shape: &[usize]) -> Result<()> {
        let t = Tensor::parameter(data, shape)?;
        self.insert(path, t, EntryKind::Parameter)
    }

    pub fn insert_buffer(&mut self, path: &str, data: Vec<f64>, shape: &[usize]) -> Result<()> {
        let t = Tensor::new(data, shape)?;
        self.insert(path, t, EntryKind::Buffer)
    }

    fn entry(&self, path: &str) -> Result<&Entry> {
        self.entries.get(path).ok_or_else(|| Error::UnknownParameter(path.to_string()))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    /// The tensor to use in a forward pass. Frozen parameters come back
    /// detached so no gradient reaches them.
    pub fn get(&self, path: &str) -> Result<Tensor> {
        let e = self.entry(path)?;
        Ok(if e.kind == EntryKind::Parameter && e.trainable {
            e.value.clone()
        } else {
            e.value.detach()
        })
    }

    pub fn values(&self, path: &str) -> Result<&[f64]> {
        Ok(self.entry(path)?.value.data())
    }

    pub fn shape(&self, path: &str) -> Result<&[usize]> {
        Ok(self.entry(path)?.value.shape())
    }

    pub fn kind(&self, path: &str) -> Result<EntryKind> {
        Ok(self.entry(path)?.kind)
    }

    /// Replaces the value of an entry, keeping its kind. Any accumulated
    /// gradient is dropped.
    pub fn set_value(&mut self, path: &str, data: Vec<f64>) -> Result<()> {
        let e = self.entries.get_mut(path).ok_or_else(|| Error::UnknownParameter(path.to_string()))?;
        if data.len() != e.value.numel() {
            return Err(Error::invalid_shape(
                "set_value",
                format!("`{path}` holds {} values, got {}", e.value.numel(), data.len()),
            ));
        }
        let shape = e.value.shape().to_vec();
        e.value = match e.kind {
            EntryKind::Parameter => Tensor::parameter(data, &shape)?,
            EntryKind::Buffer => Tensor::new(data, &shape)?,
        };
        Ok(())
    }

    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (path, e) in self.entries.iter_mut() {
            if e.kind == EntryKind::Parameter && under(path, prefix) {
                e.trainable = trainable;
            }
        }
    }

    pub fn freeze(&mut self, prefix: &str) {
        self.set_trainable(prefix, false);
    }

    pub fn unfreeze(&mut self, prefix: &str) {
        self.set_trainable(prefix, true);
    }

    pub fn is_trainable(&self, path: &str) -> Result<bool> {
        let e = self.entry(path)?;
        Ok(e.kind == EntryKind::Parameter && e.trainable)
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn paths_under<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.paths().filter(move |p| under(p, prefix))
    }

    /// Trainable parameter paths below `prefix`, in sorted order.
    pub fn trainable_paths(&self, prefix: &str) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(p, e)| e.kind == EntryKind::Parameter && e.trainable && under(p, prefix))
            .map(|(p, _)| p.clone())
            .collect()
    }

    pub fn grad(&self, path: &str) -> Result<Option<Vec<f64>>> {
        Ok(self.entry(path)?.value.grad())
    }

    pub fn zero_grad(&self) {
        for e in self.entries.values() {
            e.value.zero_grad();
        }
    }

    /// Number of scalar parameters (buffers excluded) below `prefix`.
    pub fn num_params(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(p, e)| e.kind == EntryKind::Parameter && under(p, prefix))
            .map(|(_, e)| e.value.numel())
            .sum()
    }

    /// Path, shape and kind of every entry.
    pub fn skeleton(&self) -> Vec<(String, Vec<usize>, EntryKind)> {
        self.entries
            .iter()
            .map(|(p, e)| (p.clone(), e.value.shape().to_vec(), e.kind))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
