//! Versioned binary container for datasets and checkpoints.
//!
//! Layout: 4-byte magic, little-endian `u32` format version, little-endian
//! `u64` manifest length, JSON manifest (kind + free-form metadata + tensor
//! table), then tightly packed little-endian `f32` payloads. Readers validate
//! magic, version, declared kind, and tensor shapes before any data is used.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::Arr;

const MAGIC: &[u8; 4] = b"MAR1";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a container file (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    BadVersion(u32),
    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("container kind is `{got}`, expected `{want}`")]
    KindMismatch { got: String, want: String },
    #[error("tensor `{0}` not present in container")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {got:?}, expected {want:?}")]
    ShapeMismatch {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("payload truncated or tensor table inconsistent")]
    Truncated,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload section, in f32 elements.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// An in-memory container: a kind tag, free-form JSON metadata, and named
/// tensors in insertion order.
pub struct Container {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<(String, Arr)>,
}

impl Container {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Container {
            kind: kind.to_string(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn meta(&self) -> &serde_json::Value {
        &self.meta
    }

    pub fn push(&mut self, name: &str, value: Arr) {
        self.tensors.push((name.to_string(), value));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.tensors.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn get(&self, name: &str) -> Option<&Arr> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn require(&self, name: &str) -> Result<&Arr, ContainerError> {
        self.get(name)
            .ok_or_else(|| ContainerError::MissingTensor(name.to_string()))
    }

    pub fn require_shaped(&self, name: &str, shape: &[usize]) -> Result<&Arr, ContainerError> {
        let a = self.require(name)?;
        if a.shape() != shape {
            return Err(ContainerError::ShapeMismatch {
                name: name.to_string(),
                got: a.shape().to_vec(),
                want: shape.to_vec(),
            });
        }
        Ok(a)
    }

    pub fn write(&self, path: &Path) -> Result<(), ContainerError> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, arr) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: arr.shape().to_vec(),
                offset,
            });
            offset += arr.len() as u64;
        }
        let manifest = Manifest {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest)?;

        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        let mut buf = Vec::with_capacity(1 << 16);
        for (_, arr) in &self.tensors {
            buf.clear();
            for &v in arr.as_slice().expect("container tensors are contiguous") {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            f.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, ContainerError> {
        let mut f = fs::File::open(path)?;
        let mut head = [0u8; 4];
        f.read_exact(&mut head).map_err(|_| ContainerError::BadMagic)?;
        if &head != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let mut word = [0u8; 4];
        f.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(ContainerError::BadVersion(version));
        }
        let mut len8 = [0u8; 8];
        f.read_exact(&mut len8)?;
        let json_len = u64::from_le_bytes(len8) as usize;
        let mut json = vec![0u8; json_len];
        f.read_exact(&mut json).map_err(|_| ContainerError::Truncated)?;
        let manifest: Manifest = serde_json::from_slice(&json)?;
        let mut payload = Vec::new();
        f.read_to_end(&mut payload)?;
        if payload.len() % 4 != 0 {
            return Err(ContainerError::Truncated);
        }
        let floats: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();

        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in &manifest.tensors {
            let numel: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start.checked_add(numel).ok_or(ContainerError::Truncated)?;
            if end > floats.len() {
                return Err(ContainerError::Truncated);
            }
            let arr = Arr::from_shape_vec(IxDyn(&entry.shape), floats[start..end].to_vec())
                .map_err(|_| ContainerError::Truncated)?;
            tensors.push((entry.name.clone(), arr));
        }
        Ok(Container {
            kind: manifest.kind,
            meta: manifest.meta,
            tensors,
        })
    }

    /// Read and validate the kind tag in one step.
    pub fn read_expect(path: &Path, kind: &str) -> Result<Self, ContainerError> {
        let c = Self::read(path)?;
        if c.kind != kind {
            return Err(ContainerError::KindMismatch {
                got: c.kind,
                want: kind.to_string(),
            });
        }
        Ok(c)
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn sha256_file(path: &Path) -> Result<String, ContainerError> {
    let bytes = fs::read(path)?;
    Ok(sha256_bytes(&bytes))
}
