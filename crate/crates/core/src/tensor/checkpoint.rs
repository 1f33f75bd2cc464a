//! Single-file tensor checkpoints.
//!
//! Layout: an 8-byte little-endian header length, a JSON index
//! `{"metadata": .., "tensors": {name: {dtype, shape, offset, nbytes}}}`, then
//! the raw little-endian buffers. Offsets are relative to the first byte after
//! the JSON index. Tensors are stored in name order so identical contents
//! always produce identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Float, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, TensorEntry>,
    pub metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

#[derive(Serialize, Deserialize)]
struct Index {
    metadata: serde_json::Value,
    tensors: BTreeMap<String, IndexEntry>,
}

fn dtype_size(dtype: &str) -> Result<usize> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other}"))),
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint {
            tensors: BTreeMap::new(),
            metadata: serde_json::Value::Null,
        }
    }

    pub fn insert<T: Float>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let mut bytes = Vec::with_capacity(t.numel() * T::BYTES);
        T::write_le(t.data(), &mut bytes);
        self.tensors.insert(
            name.into(),
            TensorEntry {
                dtype: T::DTYPE.to_string(),
                shape: t.shape().to_vec(),
                bytes,
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Reads a tensor, converting between `f32` and `f64` when needed.
    pub fn get<T: Float>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        match e.dtype.as_str() {
            "f32" => Tensor::new(e.shape.clone(), f32::read_le(&e.bytes)).map(|t| t.cast()),
            "f64" => Tensor::new(e.shape.clone(), f64::read_le(&e.bytes)).map(|t| t.cast()),
            other => Err(Error::Checkpoint(format!("unsupported dtype {other}"))),
        }
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut offset = 0;
    let mut tensors = BTreeMap::new();
    for (name, e) in &ckpt.tensors {
        tensors.insert(
            name.clone(),
            IndexEntry {
                dtype: e.dtype.clone(),
                shape: e.shape.clone(),
                offset,
                nbytes: e.bytes.len(),
            },
        );
        offset += e.bytes.len();
    }
    let index = Index {
        metadata: ckpt.metadata.clone(),
        tensors,
    };
    let header = serde_json::to_vec(&index)?;
    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for e in ckpt.tensors.values() {
        out.extend_from_slice(&e.bytes);
    }
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let corrupt = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 8 {
        return Err(corrupt("file shorter than header"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body_start = 8usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("header length exceeds file"))?;
    let index: Index = serde_json::from_slice(&bytes[8..body_start])?;
    let body = &bytes[body_start..];
    let mut tensors = BTreeMap::new();
    for (name, e) in index.tensors {
        let numel: usize = e.shape.iter().product();
        if numel * dtype_size(&e.dtype)? != e.nbytes {
            return Err(corrupt(&format!("tensor {name}: byte count does not match shape")));
        }
        let end = e
            .offset
            .checked_add(e.nbytes)
            .filter(|&x| x <= body.len())
            .ok_or_else(|| corrupt(&format!("tensor {name} runs past end of file")))?;
        tensors.insert(
            name,
            TensorEntry {
                dtype: e.dtype,
                shape: e.shape,
                bytes: body[e.offset..end].to_vec(),
            },
        );
    }
    Ok(Checkpoint {
        tensors,
        metadata: index.metadata,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, write_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Usage(format!("cannot read checkpoint {}: {e}", path.display())))?;
    read_checkpoint(&bytes)
}
