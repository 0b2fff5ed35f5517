//! Self-describing archives of named `f64` matrices.
//!
//! Stored as safetensors with a single JSON metadata entry. Tensors are
//! written sorted by name, so equal contents always give equal bytes.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::Array2;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde_json::Value;

use crate::error::{CapiError, Result};

const META_KEY: &str = "meta";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub tensors: BTreeMap<String, Array2<f64>>,
    pub meta: Value,
}

fn err(e: impl std::fmt::Display) -> CapiError {
    CapiError::Archive(e.to_string())
}

impl Archive {
    pub fn new(meta: Value) -> Self {
        Self {
            tensors: BTreeMap::new(),
            meta,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| err(format!("missing tensor '{name}'")))
    }

    pub fn take(&mut self, name: &str) -> Result<Array2<f64>> {
        self.tensors
            .remove(name)
            .ok_or_else(|| err(format!("missing tensor '{name}'")))
    }

    /// Removes and returns every tensor whose name starts with `prefix`,
    /// with the prefix stripped.
    pub fn take_prefixed(&mut self, prefix: &str) -> BTreeMap<String, Array2<f64>> {
        let names: Vec<String> = self
            .tensors
            .keys()
            .filter(|n| n.starts_with(prefix))
            .cloned()
            .collect();
        names
            .into_iter()
            .map(|n| {
                let t = self.tensors.remove(&n).expect("listed above");
                (n[prefix.len()..].to_string(), t)
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let bytes = t.iter().flat_map(|v| v.to_le_bytes()).collect();
                (name.clone(), vec![t.nrows(), t.ncols()], bytes)
            })
            .collect();
        let views = buffers
            .iter()
            .map(|(name, shape, bytes)| {
                Ok((
                    name.as_str(),
                    TensorView::new(Dtype::F64, shape.clone(), bytes).map_err(err)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&self.meta)?)]);
        safetensors::serialize(views, &Some(info)).map_err(err)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes).map_err(err)?;
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(err)?;
        let meta = match header.metadata().as_ref().and_then(|m| m.get(META_KEY)) {
            Some(text) => serde_json::from_str(text)?,
            None => Value::Null,
        };
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F64 {
                return Err(err(format!(
                    "tensor '{name}' has dtype {:?}, expected F64",
                    view.dtype()
                )));
            }
            let shape = view.shape();
            if shape.len() != 2 {
                return Err(err(format!(
                    "tensor '{name}' has rank {}, expected 2",
                    shape.len()
                )));
            }
            let values: Vec<f64> = view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let t = Array2::from_shape_vec((shape[0], shape[1]), values).map_err(err)?;
            tensors.insert(name, t);
        }
        Ok(Self { tensors, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
