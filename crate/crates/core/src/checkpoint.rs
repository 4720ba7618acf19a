//! Named-tensor checkpoint container.
//!
//! Layout: the 8-byte magic `HDCKPT1\n`, a little-endian `u64` header
//! length, a JSON header, then the tensor payload as little-endian `f64`
//! in header order. The header carries the model kind, its configuration
//! (as JSON) and a SHA-256 hash of that configuration, so a checkpoint
//! can be rejected when loaded against a mismatched architecture.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{collect, collect_mut, ParamTensors};

const MAGIC: &[u8; 8] = b"HDCKPT1\n";

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    config_hash: String,
    tensors: Vec<TensorInfo>,
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of a serializable config. The bytes are canonicalized by passing
/// through `serde_json::Value` (sorted keys), so the hash is independent
/// of struct field order.
pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    let value = serde_json::to_value(config).map_err(|e| Error::Param(format!("config serialization: {e}")))?;
    let json = serde_json::to_vec(&value).map_err(|e| Error::Param(format!("config serialization: {e}")))?;
    Ok(hex_digest(&json))
}

/// Save a model's tensors with its config.
pub fn save<P: ParamTensors, C: Serialize>(model: &P, kind: &str, config: &C, path: &Path) -> Result<()> {
    let tensors = collect(model);
    let header = Header {
        kind: kind.to_string(),
        config: serde_json::to_value(config).map_err(|e| Error::Param(format!("config serialization: {e}")))?,
        config_hash: config_hash(config)?,
        tensors: tensors
            .iter()
            .map(|(name, view)| TensorInfo { name: name.clone(), shape: view.shape().to_vec() })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::Param(format!("header: {e}")))?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    for (_, view) in &tensors {
        for v in view.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Load tensors into an existing model of the right architecture. The
/// model must enumerate exactly the stored tensor names and shapes; the
/// stored config and its hash are returned for the caller to verify.
pub fn load<P: ParamTensors>(model: &mut P, kind: &str, path: &Path) -> Result<serde_json::Value> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse { line: 0, msg: format!("{}: not a checkpoint file", path.display()) });
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Parse { line: 0, msg: format!("checkpoint header: {e}") })?;
    if header.kind != kind {
        return Err(Error::Param(format!("checkpoint kind '{}' does not match expected '{kind}'", header.kind)));
    }
    let expected_hash = hex_digest(&serde_json::to_vec(&header.config).unwrap());
    if expected_hash != header.config_hash {
        return Err(Error::Parse { line: 0, msg: "checkpoint config hash mismatch".into() });
    }

    let mut views = collect_mut(model);
    if views.len() != header.tensors.len() {
        return Err(Error::Param(format!(
            "checkpoint holds {} tensors but the model expects {}",
            header.tensors.len(),
            views.len()
        )));
    }
    for (view, info) in views.iter_mut().zip(header.tensors.iter()) {
        if view.0 != info.name || view.1.shape() != info.shape.as_slice() {
            return Err(Error::Param(format!(
                "checkpoint tensor '{}' {:?} does not match model tensor '{}' {:?}",
                info.name,
                info.shape,
                view.0,
                view.1.shape()
            )));
        }
        let slice = view.1.as_slice_mut().ok_or_else(|| Error::Numeric("non-contiguous tensor".into()))?;
        let mut buf = vec![0u8; slice.len() * 8];
        f.read_exact(&mut buf)?;
        for (i, chunk) in buf.chunks_exact(8).enumerate() {
            slice[i] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    Ok(header.config)
}
