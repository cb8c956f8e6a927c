//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic          8 bytes  "XSITCKPT"
//! version        u32      1
//! manifest_len   u64      byte length of the manifest
//! manifest       JSON     {"metadata": <any>, "tensors": [{"name", "dtype", "shape"}, ...]}
//! payload        f32 LE   each tensor's data, concatenated in manifest order
//! ```
//!
//! Payload floats are copied bit for bit, so a write/read round trip is exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{numel, Tensor};
use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 8] = b"XSITCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Decoded container contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn encode_container(
    metadata: &serde_json::Value,
    tensors: &[(&str, &Tensor<f32>)],
) -> Result<Vec<u8>> {
    let manifest = Manifest {
        metadata: metadata.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest encoding: {e}")))?;
    let payload: usize = tensors.iter().map(|(_, t)| t.numel() * 4).sum();
    let mut out = Vec::with_capacity(20 + json.len() + payload);
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<Container> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 20 || &bytes[..8] != CONTAINER_MAGIC {
        return Err(bad("not a tensor container (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported container version {version}"
        )));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < mlen {
        return Err(bad("truncated manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&body[..mlen])
        .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    let mut payload = &body[mlen..];
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in manifest.tensors {
        if entry.dtype != "f32" {
            return Err(Error::Checkpoint(format!(
                "tensor {}: unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        let n = numel(&entry.shape);
        if payload.len() < n * 4 {
            return Err(Error::Checkpoint(format!(
                "tensor {}: payload truncated",
                entry.name
            )));
        }
        let data = payload[..n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        payload = &payload[n * 4..];
        tensors.push((entry.name, Tensor::new(entry.shape, data)?));
    }
    if !payload.is_empty() {
        return Err(bad("trailing bytes after payload"));
    }
    Ok(Container {
        metadata: manifest.metadata,
        tensors,
    })
}

/// Write a container atomically (temporary file, then rename).
pub fn write_container(
    path: &Path,
    metadata: &serde_json::Value,
    tensors: &[(&str, &Tensor<f32>)],
) -> Result<()> {
    let bytes = encode_container(metadata, tensors)?;
    crate::io::write_atomic(path, &bytes)
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes)
}
