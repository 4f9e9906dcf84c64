//! Named parameter storage and the binary checkpoint format.
//!
//! Checkpoint layout: the 8-byte magic `RMCKPT01`, a little-endian `u64`
//! byte length followed by a UTF-8 JSON manifest, then the raw
//! little-endian buffers of every tensor in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RMCKPT01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

/// Model state: trainable parameters and non-trainable buffers (running
/// normalization statistics), addressed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor<T>, trainable: bool) -> ParamId {
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter {name}"
        );
        self.entries.push(Entry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.is_trainable(id))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of free scalars; buffers are excluded.
    pub fn count_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }

    /// Serializes the store with an attached JSON description of the model.
    pub fn to_checkpoint_bytes(&self, model: &serde_json::Value) -> Result<Vec<u8>> {
        let manifest = Manifest {
            scalar_bytes: T::BYTES,
            model: model.clone(),
            tensors: self
                .entries
                .iter()
                .map(|e| TensorEntry {
                    name: e.name.clone(),
                    shape: e.value.shape().to_vec(),
                    trainable: e.trainable,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + self.entries.len() * 64);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for e in &self.entries {
            for &v in e.value.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<(Self, serde_json::Value)> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing RMCKPT01 magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + len)
            .ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        if manifest.scalar_bytes != T::BYTES {
            return Err(Error::Checkpoint(format!(
                "checkpoint stores {}-byte scalars, loader expects {}",
                manifest.scalar_bytes,
                T::BYTES
            )));
        }
        let mut offset = 16 + len;
        let mut store = Self::new();
        for t in manifest.tensors {
            let n: usize = t.shape.iter().product();
            let raw = bytes
                .get(offset..offset + n * T::BYTES)
                .ok_or_else(|| Error::Checkpoint(format!("truncated data for {}", t.name)))?;
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            offset += n * T::BYTES;
            store.push(t.name, Tensor::new(&t.shape, data)?, t.trainable);
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok((store, manifest.model))
    }

    pub fn save(&self, path: &Path, model: &serde_json::Value) -> Result<()> {
        let bytes = self.to_checkpoint_bytes(model)?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }

    /// Copies values from `other` by name. Shapes must agree.
    pub fn assign_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for e in &mut self.entries {
            let id = other
                .find(&e.name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {}", e.name)))?;
            let src = other.get(id);
            if src.shape() != e.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: shape {:?} in checkpoint, model expects {:?}",
                    e.name,
                    src.shape(),
                    e.value.shape()
                )));
            }
            e.value = src.clone();
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    scalar_bytes: usize,
    model: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}
