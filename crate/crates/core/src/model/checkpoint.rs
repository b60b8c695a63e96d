//! Checkpoint files.
//!
//! Layout: the magic `BFCK`, a little-endian `u32` format version, a
//! little-endian `u64` header length, the header as compact JSON, then the
//! payload: every parameter in header order followed by the optimizer
//! moments (all `m`, then all `v`) when present, each value little-endian in
//! the header's dtype. The header carries the SHA-256 of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig};
use crate::error::CheckpointError;
use crate::tensor::{DType, Float, Tensor};
use crate::train::AdamState;

pub const MAGIC: &[u8; 4] = b"BFCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub dtype: DType,
    pub config: ModelConfig,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: u64,
    pub params: Vec<ParamEntry>,
    /// Adam update count, present when moments follow the parameters.
    pub optimizer_t: Option<u64>,
    pub payload_bytes: u64,
    pub payload_sha256: String,
}

/// A decoded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub step: u64,
    pub optimizer: Option<AdamState<T>>,
}

/// Serialises `model` (and optionally its optimizer state) to bytes.
pub fn to_bytes<T: Float>(
    model: &Model<T>,
    step: u64,
    optimizer: Option<&AdamState<T>>,
) -> Result<Vec<u8>, CheckpointError> {
    let ps = &model.params;
    if let Some(o) = optimizer {
        if !o.matches(ps) {
            return Err(CheckpointError::ParamMismatch(
                "optimizer state does not match parameters".into(),
            ));
        }
    }
    let mut payload = Vec::with_capacity(
        (ps.numel() * if optimizer.is_some() { 3 } else { 1 }) * T::DTYPE.size_of(),
    );
    let mut put = |t: &Tensor<T>| t.data().iter().for_each(|v| v.write_le(&mut payload));
    ps.ids().for_each(|id| put(ps.get(id)));
    if let Some(o) = optimizer {
        o.m.iter().chain(&o.v).for_each(&mut put);
    }
    let header = CheckpointHeader {
        dtype: T::DTYPE,
        config: model.config.clone(),
        step,
        params: ps
            .ids()
            .map(|id| ParamEntry {
                name: ps.name(id).to_string(),
                shape: ps.get(id).shape().to_vec(),
            })
            .collect(),
        optimizer_t: optimizer.map(|o| o.t),
        payload_bytes: payload.len() as u64,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Splits and validates the header, returning it with the verified payload.
pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8]), CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(CheckpointError::Corrupt(
            "file ends inside the preamble".into(),
        ));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if hlen > body.len() {
        return Err(CheckpointError::Corrupt(
            "file ends inside the header".into(),
        ));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])
        .map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
    let payload = &body[hlen..];
    let actual = hex::encode(Sha256::digest(payload));
    if actual != header.payload_sha256 || payload.len() as u64 != header.payload_bytes {
        return Err(CheckpointError::Checksum {
            expected: header.payload_sha256,
            actual,
        });
    }
    Ok((header, payload))
}

/// Rebuilds the model described by the header and fills in the stored values.
pub fn from_bytes<T: Float>(bytes: &[u8]) -> Result<Checkpoint<T>, CheckpointError> {
    let (header, payload) = read_header(bytes)?;
    if header.dtype != T::DTYPE {
        return Err(CheckpointError::DType {
            found: header.dtype,
            requested: T::DTYPE,
        });
    }
    let mut model = Model::<T>::build(&header.config)?;
    let ps = &model.params;
    let table_matches = header.params.len() == ps.len()
        && header
            .params
            .iter()
            .zip(ps.ids())
            .all(|(e, id)| e.name == ps.name(id) && e.shape == ps.get(id).shape());
    if !table_matches {
        return Err(CheckpointError::ParamMismatch(format!(
            "stored table has {} tensors, {} builds {}",
            header.params.len(),
            header.config.task,
            ps.len()
        )));
    }
    let width = T::DTYPE.size_of();
    let numel = ps.numel();
    let expected = numel * width * if header.optimizer_t.is_some() { 3 } else { 1 };
    if payload.len() != expected {
        return Err(CheckpointError::Corrupt(format!(
            "payload holds {} bytes, table needs {expected}",
            payload.len()
        )));
    }
    let mut chunks = payload.chunks_exact(width).map(T::read_le);
    let mut take = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::from_vec(shape, chunks.by_ref().take(n).collect()).expect("length checked")
    };
    let ids: Vec<_> = model.params.ids().collect();
    for &id in &ids {
        let t = take(model.params.get(id).shape());
        model.params.set(id, t)?;
    }
    let optimizer = header.optimizer_t.map(|t| {
        let m = ids
            .iter()
            .map(|&id| take(model.params.get(id).shape()))
            .collect();
        let v = ids
            .iter()
            .map(|&id| take(model.params.get(id).shape()))
            .collect();
        AdamState { t, m, v }
    });
    Ok(Checkpoint {
        model,
        step: header.step,
        optimizer,
    })
}

pub fn save<T: Float>(
    path: &Path,
    model: &Model<T>,
    step: u64,
    optimizer: Option<&AdamState<T>>,
) -> Result<(), CheckpointError> {
    let bytes = to_bytes(model, step, optimizer)?;
    std::fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load<T: Float>(path: &Path) -> Result<Checkpoint<T>, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}

/// Header of a checkpoint file without decoding the payload into a model.
pub fn inspect(path: &Path) -> Result<CheckpointHeader, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(read_header(&bytes)?.0)
}
