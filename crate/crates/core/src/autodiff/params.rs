use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

const FORMAT_VERSION: u32 = 1;

/// Named parameter tensors with gradient accumulators.
///
/// Values may be read concurrently by many graphs; gradient accumulation
/// and optimizer steps need `&mut self`. Iteration order is the name
/// order (`BTreeMap`), which keeps every reduction deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

#[derive(Clone, Debug)]
struct ParamEntry {
    value: Tensor,
    grad: Tensor,
}

/// Gradients keyed by parameter name, produced by `Graph::backward` and
/// merged into a [`ParamStore`] (or each other) at a barrier.
#[derive(Clone, Debug, Default)]
pub struct GradBuffer {
    grads: BTreeMap<String, Tensor>,
}

impl GradBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn accumulate_tensor(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        match self.grads.get_mut(name) {
            Some(t) => t.add_scaled(grad, 1.0),
            None => {
                self.grads.insert(name.to_string(), grad.clone());
                Ok(())
            }
        }
    }

    /// Merge another buffer into this one, scaled.
    pub fn merge_scaled(&mut self, other: &GradBuffer, scale: f64) -> Result<()> {
        for (name, grad) in other.iter() {
            match self.grads.get_mut(name) {
                Some(t) => t.add_scaled(grad, scale)?,
                None => {
                    let mut g = Tensor::zeros(grad.rows(), grad.cols());
                    g.add_scaled(grad, scale)?;
                    self.grads.insert(name.to_string(), g);
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.grads.values_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }

    /// Global L2 norm over all gradients.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct StoreDoc {
    format_version: u32,
    entries: Vec<EntryDoc>,
}

#[derive(Serialize, Deserialize)]
struct EntryDoc {
    name: String,
    shape: (usize, usize),
    values: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("parameter `{name}` already exists")));
        }
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.entries
            .insert(name.to_string(), ParamEntry { value, grad });
        Ok(())
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.grad)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Add `buf` into the gradient accumulators. Repeated calls keep
    /// accumulating until [`ParamStore::zero_grads`].
    pub fn accumulate(&mut self, buf: &GradBuffer) -> Result<()> {
        for (name, grad) in buf.iter() {
            let entry = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
            entry.grad.add_scaled(grad, 1.0)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.fill(0.0);
        }
    }

    /// Iterate `(name, value, grad)` triples in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.as_str(), &e.value, &e.grad))
    }

    pub fn apply<F>(&mut self, name: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut Tensor),
    {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        f(&mut entry.value);
        Ok(())
    }

    /// Copy parameter values from another store (shapes must agree).
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, entry) in self.entries.iter_mut() {
            let src = other
                .value(name)
                .ok_or_else(|| Error::UnknownParam(name.clone()))?;
            entry.value = src.clone();
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = StoreDoc {
            format_version: FORMAT_VERSION,
            entries: self
                .entries
                .iter()
                .map(|(name, e)| EntryDoc {
                    name: name.clone(),
                    shape: e.value.shape(),
                    values: e.value.data().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: StoreDoc = serde_json::from_str(s)?;
        if doc.format_version != FORMAT_VERSION {
            return Err(Error::Data {
                line: None,
                msg: format!("unsupported parameter format_version {}", doc.format_version),
            });
        }
        let mut store = ParamStore::new();
        for e in doc.entries {
            store.insert(&e.name, Tensor::new(e.shape.0, e.shape.1, e.values)?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        let doc = StoreDoc {
            format_version: FORMAT_VERSION,
            entries: self
                .entries
                .iter()
                .map(|(name, e)| EntryDoc {
                    name: name.clone(),
                    shape: e.value.shape(),
                    values: e.value.data().to_vec(),
                })
                .collect(),
        };
        serde_json::to_writer_pretty(&mut w, &doc)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let doc: StoreDoc = serde_json::from_reader(BufReader::new(file))?;
        if doc.format_version != FORMAT_VERSION {
            return Err(Error::Data {
                line: None,
                msg: format!("unsupported parameter format_version {}", doc.format_version),
            });
        }
        let mut store = ParamStore::new();
        for e in doc.entries {
            store.insert(&e.name, Tensor::new(e.shape.0, e.shape.1, e.values)?)?;
        }
        Ok(store)
    }
}
