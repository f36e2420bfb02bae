use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors, ordered by name.
///
/// Serializes to the checkpoint format: a JSON object mapping each
/// parameter name to `{"shape": [...], "values": [...]}` (row-major).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

/// Key reserved for artifact metadata inside a checkpoint object.
pub const META_KEY: &str = "__meta__";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn expect(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Copies every tensor of `other` in under `prefix`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (name, t) in other.iter() {
            self.insert(format!("{prefix}{name}"), t.clone());
        }
    }

    /// The subset whose names start with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, t) in self.iter() {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.insert(rest, t.clone());
            }
        }
        out
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Verifies that `other` has exactly the same names and shapes.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        let mut problems = Vec::new();
        for (name, t) in self.iter() {
            match other.get(name) {
                None => problems.push(format!("{name}: missing")),
                Some(o) if o.shape() != t.shape() => {
                    problems.push(format!("{name}: expected {:?}, found {:?}", t.shape(), o.shape()))
                }
                _ => {}
            }
        }
        for name in other.names() {
            if self.get(name).is_none() {
                problems.push(format!("{name}: unexpected"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::ArtifactMismatch(format!(
                "checkpoint layout differs: {}",
                problems.join("; ")
            )))
        }
    }

    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        for (name, t) in self.iter() {
            map.insert(name.clone(), serde_json::to_value(t).expect("tensor serializes"));
        }
        Value::Object(map)
    }

    /// Parses a checkpoint object; the metadata key, if present, is skipped.
    pub fn from_json(value: &Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::contract("checkpoint must be a JSON object"))?;
        let mut store = ParamStore::new();
        for (name, v) in obj {
            if name == META_KEY {
                continue;
            }
            let t: Tensor = serde_json::from_value(v.clone())?;
            // re-validate: serde bypasses the shape check in Tensor::new
            let t = Tensor::new(t.shape().to_vec(), t.into_data()).map_err(|e| {
                Error::contract(format!("parameter {name:?} is malformed: {e}"))
            })?;
            store.insert(name.clone(), t);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path, meta: Option<Value>) -> Result<()> {
        let mut value = self.to_json();
        if let (Some(meta), Value::Object(map)) = (meta, &mut value) {
            map.insert(META_KEY.to_string(), meta);
        }
        let text = serde_json::to_string(&value)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, Option<Value>)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = serde_json::from_str(&text)?;
        let meta = value.get(META_KEY).cloned();
        Ok((Self::from_json(&value)?, meta))
    }
}
