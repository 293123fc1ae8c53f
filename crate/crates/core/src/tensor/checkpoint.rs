//! Single-file tensor archive: an 8-byte magic, a format version, a JSON
//! manifest naming every tensor, then the raw little-endian `f64` data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::params::ParamStore;
use super::tape::numel;
use crate::Scalar;

const MAGIC: &[u8; 8] = b"CVAECKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("tensor {0} missing from checkpoint")]
    Missing(String),
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    Shape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("{0}")]
    Incompatible(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

/// Named tensors plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint { meta, tensors: Vec::new() }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, shape: &[usize], data: &[T]) {
        self.tensors.push(TensorRecord {
            name: name.into(),
            shape: shape.to_vec(),
            data: data.iter().map(|v| v.as_f64()).collect(),
        });
    }

    pub fn get(&self, name: &str) -> Result<&TensorRecord, CheckpointError> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    /// Adds every entry of `store` under `prefix`.
    pub fn push_store<T: Scalar>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (_, p) in store.iter() {
            self.push(format!("{prefix}{}", p.name), &p.shape, &p.value);
        }
    }

    /// Overwrites every entry of `store` from tensors stored under `prefix`.
    pub fn load_store<T: Scalar>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<(), CheckpointError> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            let rec = self.get(&format!("{prefix}{}", p.name))?;
            if rec.shape != p.shape {
                return Err(CheckpointError::Shape { name: p.name.clone(), expected: p.shape.clone(), found: rec.shape.clone() });
            }
            p.value = rec.data.iter().map(|&v| T::lit(v)).collect();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let e = ManifestEntry { name: t.name.clone(), shape: t.shape.clone(), offset };
                offset += t.data.len();
                e
            })
            .collect();
        let manifest = serde_json::to_vec(&Manifest { meta: self.meta.clone(), tensors }).expect("manifest serializes");
        let mut out = Vec::with_capacity(20 + manifest.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 20 {
            return Err(if bytes.starts_with(MAGIC) { CheckpointError::Truncated } else { CheckpointError::BadMagic });
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20usize.checked_add(len).ok_or(CheckpointError::Truncated)?).ok_or(CheckpointError::Truncated)?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        let data = &bytes[20 + len..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let n = numel(&e.shape);
            let raw = data.get(e.offset * 8..(e.offset + n) * 8).ok_or(CheckpointError::Truncated)?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push(TensorRecord { name: e.name, shape: e.shape, data: values });
        }
        Ok(Checkpoint { meta: manifest.meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let mut c = Checkpoint::new(serde_json::json!({"kind": "test"}));
        c.push("a", &[2, 2], &[1.0f64, -2.5, 3.25, f64::MIN_POSITIVE]);
        c.push("b", &[], &[7.0f64]);
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..8], b"CVAECKPT");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated)));
        assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT0000000000000"), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn store_round_trip_checks_shapes() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", &[3], vec![1.0, 2.0, 3.0], true);
        let mut c = Checkpoint::new(serde_json::Value::Null);
        c.push_store("p/", &s);
        let mut fresh = ParamStore::<f64>::new();
        fresh.insert("w", &[3], vec![0.0; 3], true);
        c.load_store("p/", &mut fresh).unwrap();
        assert_eq!(fresh.get(fresh.find("w").unwrap()).value, vec![1.0, 2.0, 3.0]);
        let mut wrong = ParamStore::<f64>::new();
        wrong.insert("w", &[1, 3], vec![0.0; 3], true);
        assert!(matches!(c.load_store("p/", &mut wrong), Err(CheckpointError::Shape { .. })));
    }
}
