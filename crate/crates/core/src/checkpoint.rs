//! Versioned binary checkpoints.
//!
//! Layout:
//!
//! ```text
//! b"SFCK"                 magic
//! u32 LE                  format version
//! u64 LE                  metadata length in bytes
//! metadata                UTF-8 JSON
//! parameter blob          little-endian floats, tensors back to back
//! ```
//!
//! The metadata records the model configuration, head, scaler, element type and,
//! per tensor, its name, shape and byte offset into the blob. `f32` models store
//! 4-byte floats; `f64` models store 8-byte floats so their round trip is also exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::write_atomic;
use crate::error::{Error, Result};
use crate::model::{parameter_layout, Model, ModelConfig, OutputHead};
use crate::params::ParamSet;
use crate::preprocess::Scaler;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SFCK";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

/// A model together with the scaler fitted on the data it was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub model: Model<S>,
    pub scaler: Scaler,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub format_version: u32,
    pub dtype: String,
    pub config: ModelConfig,
    pub head: OutputHead,
    pub scaler: Scaler,
    pub tensors: Vec<TensorEntry>,
}

fn width(dtype: &str) -> Result<usize> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(Error::Checkpoint(format!("unsupported element type `{other}`"))),
    }
}

impl<S: Scalar> Checkpoint<S> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let w = width(S::NAME)?;
        let mut tensors = Vec::with_capacity(self.model.params.len());
        let mut offset = 0u64;
        for (name, t) in self.model.params.iter() {
            tensors.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), offset });
            offset += (t.len() * w) as u64;
        }
        let meta = Metadata {
            format_version: FORMAT_VERSION,
            dtype: S::NAME.to_string(),
            config: self.model.config.clone(),
            head: self.model.head,
            scaler: self.scaler.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(PREAMBLE + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.model.params.iter() {
            for &v in t.data() {
                if w == 4 {
                    out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
                } else {
                    out.extend_from_slice(&v.as_f64().to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint. A file stored with a different element type is converted.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let meta = read_metadata(bytes)?;
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let blob = &bytes[PREAMBLE + json_len..];
        let w = width(&meta.dtype)?;

        let expected = parameter_layout(&meta.config, meta.head);
        if expected.len() != meta.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "manifest lists {} tensors, the configuration implies {}",
                meta.tensors.len(),
                expected.len()
            )));
        }
        let mut params = ParamSet::new();
        let mut cursor = 0u64;
        for ((name, shape), entry) in expected.iter().zip(&meta.tensors) {
            if *name != entry.name || *shape != entry.shape {
                return Err(Error::Checkpoint(format!(
                    "manifest entry `{}` {:?} disagrees with expected `{name}` {shape:?}",
                    entry.name, entry.shape
                )));
            }
            if entry.offset != cursor {
                return Err(Error::Checkpoint(format!("tensor `{name}` has offset {} but should start at {cursor}", entry.offset)));
            }
            let n: usize = shape.iter().product();
            let start = cursor as usize;
            let end = start + n * w;
            if end > blob.len() {
                return Err(Error::Checkpoint(format!("parameter blob truncated inside `{name}`")));
            }
            let data: Vec<S> = blob[start..end]
                .chunks_exact(w)
                .map(|c| {
                    let v = if w == 4 {
                        f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64
                    } else {
                        f64::from_le_bytes(c.try_into().expect("8 bytes"))
                    };
                    S::from_f64_lossy(v)
                })
                .collect();
            params.insert(name.clone(), Tensor::new(shape.clone(), data)?);
            cursor = end as u64;
        }
        if cursor as usize != blob.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the parameter blob",
                blob.len() - cursor as usize
            )));
        }
        if !params.all_finite() {
            return Err(Error::Checkpoint("non-finite parameter values".into()));
        }
        Ok(Checkpoint { model: Model { config: meta.config, head: meta.head, params }, scaler: meta.scaler })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read checkpoint `{}`: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

/// Decodes and validates the header and metadata without touching the blob.
pub fn read_metadata(bytes: &[u8]) -> Result<Metadata> {
    if bytes.len() < PREAMBLE {
        return Err(Error::Checkpoint("file too short for a checkpoint header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let available = (bytes.len() - PREAMBLE) as u64;
    if json_len > available {
        return Err(Error::Checkpoint(format!(
            "metadata length {json_len} exceeds the {available} bytes after the header"
        )));
    }
    let json = &bytes[PREAMBLE..PREAMBLE + json_len as usize];
    let meta: Metadata = serde_json::from_slice(json)
        .map_err(|e| Error::Checkpoint(format!("malformed metadata: {e}")))?;
    if meta.format_version != version {
        return Err(Error::Checkpoint("metadata and header disagree on the format version".into()));
    }
    meta.config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("stored configuration is invalid: {e}")))?;
    if meta.scaler.n_dims() != meta.config.n_dims {
        return Err(Error::Checkpoint(format!(
            "scaler covers {} dimensions, model has {}",
            meta.scaler.n_dims(),
            meta.config.n_dims
        )));
    }
    Ok(meta)
}
