//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"SSEV" | version: u32 | header_len: u32 | header: UTF-8 JSON | f64 blobs
//! ```
//!
//! The header carries the module name, free-form architecture dimensions and
//! the ordered `{name, shape}` manifest; the blobs follow in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::NnError;

pub const MAGIC: &[u8; 4] = b"SSEV";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub module: String,
    pub arch: serde_json::Value,
    pub params: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub module: String,
    pub arch: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(module: impl Into<String>, arch: serde_json::Value) -> Self {
        Self {
            module: module.into(),
            arch,
            tensors: Vec::new(),
        }
    }

    pub fn with_tensors(mut self, tensors: Vec<(String, Tensor)>) -> Self {
        self.tensors.extend(tensors);
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, NnError> {
        let header = CheckpointHeader {
            module: self.module.clone(),
            arch: self.arch.clone(),
            params: self
                .tensors
                .iter()
                .map(|(n, t)| ManifestEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let floats: usize = self.tensors.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(12 + json.len() + 8 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let len = u32::try_from(json.len())
            .map_err(|_| NnError::Checkpoint("header larger than 4 GiB".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let bad = |m: &str| NnError::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("missing SSEV magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])?;
        let mut blob = &body[hlen..];
        let mut tensors = Vec::with_capacity(header.params.len());
        for entry in header.params {
            let n: usize = entry.shape.iter().product();
            if blob.len() < 8 * n {
                return Err(NnError::Checkpoint(format!(
                    "truncated data for `{}`",
                    entry.name
                )));
            }
            let data = blob[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            blob = &blob[8 * n..];
            tensors.push((entry.name, Tensor::new(entry.shape, data)?));
        }
        if !blob.is_empty() {
            return Err(bad("trailing bytes after last tensor"));
        }
        Ok(Self {
            module: header.module,
            arch: header.arch,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
