//! `gdv1` checkpoint container.
//!
//! Layout: an 8-byte little-endian manifest length, the UTF-8 JSON manifest,
//! then the raw little-endian tensor payload. The manifest maps every tensor
//! name to its shape, dtype and byte offset into the payload and carries the
//! SHA-256 of the payload for integrity checking.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: &str = "gdv1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    dtype: Dtype,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    version: String,
    payload_bytes: usize,
    payload_sha256: String,
    tensors: BTreeMap<String, TensorEntry>,
    meta: serde_json::Value,
}

/// Parameters plus free-form metadata read back from a checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub store: ParamStore,
    pub meta: serde_json::Value,
}

pub fn encode(store: &ParamStore, meta: &serde_json::Value, dtype: Dtype) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(store.num_scalars() * dtype.width());
    let mut tensors = BTreeMap::new();
    for (_, name, t) in store.iter() {
        tensors.insert(
            name.to_string(),
            TensorEntry {
                shape: t.shape().to_vec(),
                dtype,
                offset: payload.len(),
            },
        );
        for &v in t.data() {
            match dtype {
                Dtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                Dtype::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION.to_string(),
        payload_bytes: payload.len(),
        payload_sha256: hex::encode(Sha256::digest(&payload)),
        tensors,
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 8 {
        return Err(bad("truncated header"));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(8..8 + len).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version `{}`", manifest.version)));
    }
    let payload = &bytes[8 + len..];
    if payload.len() != manifest.payload_bytes {
        return Err(bad("payload length does not match manifest"));
    }
    if hex::encode(Sha256::digest(payload)) != manifest.payload_sha256 {
        return Err(bad("payload checksum mismatch (corrupt checkpoint)"));
    }
    let mut entries: Vec<_> = manifest.tensors.into_iter().collect();
    entries.sort_by_key(|(_, e)| e.offset);
    let mut store = ParamStore::new();
    for (name, e) in entries {
        let n: usize = e.shape.iter().product();
        let w = e.dtype.width();
        let raw = payload
            .get(e.offset..e.offset + n * w)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` out of bounds")))?;
        let data = raw
            .chunks_exact(w)
            .map(|c| match e.dtype {
                Dtype::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
                Dtype::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
            })
            .collect();
        store.add(name, Tensor::new(e.shape, data)?)?;
    }
    Ok(Checkpoint {
        store,
        meta: manifest.meta,
    })
}

pub fn write(path: &Path, store: &ParamStore, meta: &serde_json::Value, dtype: Dtype) -> Result<()> {
    let bytes = encode(store, meta, dtype)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
