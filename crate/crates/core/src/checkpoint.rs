//! Parameter checkpoints: a JSON container mapping parameter-path strings to
//! (shape, row-major f64 values), plus free-form metadata. serde_json prints
//! f64 with a shortest round-tripping representation, so save → load is
//! bit-exact.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: BTreeMap<String, TensorEntry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn insert(&mut self, path: &str, t: &Tensor) {
        self.tensors.insert(
            path.to_string(),
            TensorEntry { shape: t.shape().to_vec(), values: t.data().to_vec() },
        );
    }

    pub fn tensor(&self, path: &str) -> Result<Tensor> {
        let entry = self
            .tensors
            .get(path)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{path}'")))?;
        Tensor::new(entry.shape.clone(), entry.values.clone())
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta
            .get(key)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint(format!("missing or non-integer meta field '{key}'")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("parse: {e}")))
    }
}
