//! Checkpoint container:
//!
//! ```text
//! b"SEGKITCK" | u32 LE version | u64 LE header length | JSON header | payload
//! ```
//!
//! The header echoes the model config and lists `(name, shape, dtype)` for
//! every tensor; the payload is each tensor's values as little-endian f64, in
//! header order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

use super::{ModelConfig, ModelError, Result, SegModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SEGKITCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

fn ck_err(path: &Path, reason: impl Into<String>) -> ModelError {
    ModelError::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn save_checkpoint(path: &Path, model: &SegModel) -> Result<()> {
    let header = Header {
        config: model.config.clone(),
        tensors: model
            .store
            .iter()
            .map(|(_, p)| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                dtype: "f64".into(),
                trainable: p.trainable,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ck_err(path, e.to_string()))?;
    let payload: usize = model.store.iter().map(|(_, p)| p.value.numel() * 8).sum();
    let mut out = Vec::with_capacity(20 + json.len() + payload);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in model.store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    let io = |e| ModelError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    fs::write(&tmp, &out).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

/// Rebuilds the model from the embedded config and restores every tensor.
pub fn load_checkpoint(path: &Path) -> Result<SegModel> {
    let bytes = fs::read(path).map_err(|e| ModelError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(ck_err(path, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(ck_err(path, format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header_bytes = bytes
        .get(20..20 + hlen)
        .ok_or_else(|| ck_err(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| ck_err(path, format!("bad header: {e}")))?;
    let mut model = SegModel::build(header.config, 0)?;
    if header.tensors.len() != model.store.len() {
        return Err(ck_err(
            path,
            format!(
                "{} tensors listed, architecture has {}",
                header.tensors.len(),
                model.store.len()
            ),
        ));
    }
    let mut pos = 20 + hlen;
    for entry in &header.tensors {
        let id = model
            .store
            .find(&entry.name)
            .ok_or_else(|| ck_err(path, format!("unknown tensor {}", entry.name)))?;
        if model.store.value(id).shape() != entry.shape.as_slice() || entry.dtype != "f64" {
            return Err(ck_err(
                path,
                format!(
                    "tensor {} is {:?}/{}, expected {:?}/f64",
                    entry.name,
                    entry.shape,
                    entry.dtype,
                    model.store.value(id).shape()
                ),
            ));
        }
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(pos..pos + n * 8)
            .ok_or_else(|| ck_err(path, format!("truncated payload at {}", entry.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *model.store.value_mut(id) = Tensor::new(&entry.shape, data)?;
        pos += n * 8;
    }
    if pos != bytes.len() {
        return Err(ck_err(path, format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(model)
}

/// Per-tensor shapes and counts with trainable/buffer totals.
pub fn param_manifest(model: &SegModel) -> String {
    let c = &model.config;
    let mut s = format!(
        "# {} + {} at {}x{}\n",
        c.variant, c.decoder, c.input_size.0, c.input_size.1
    );
    for (_, p) in model.store.iter() {
        let kind = if p.trainable { "" } else { "  (buffer)" };
        let _ = writeln!(
            s,
            "{:<56} {:>18} {:>10}{kind}",
            p.name,
            format!("{:?}", p.value.shape()),
            p.value.numel()
        );
    }
    let _ = writeln!(s, "trainable parameters: {}", model.store.trainable_count());
    let _ = writeln!(s, "buffers: {}", model.store.buffer_count());
    s
}
