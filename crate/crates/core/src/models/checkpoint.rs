//! Single-file model container.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, a JSON header,
//! then every tensor as little-endian `f32` in header order. The header
//! carries a SHA-256 of the payload so truncation and bit rot are caught.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ClassifierModel, ModelSpec};
use crate::dataset::ClassRegistry;
use crate::error::{Error, Result};
use crate::nn::{ParamKind, Tensor};
use crate::preprocess::PreprocessConfig;

const MAGIC: &[u8; 8] = b"TLCKPT\x00\x01";
pub const CODE_VERSION: &str = concat!("tealeaf-core ", env!("CARGO_PKG_VERSION"));

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 4],
    buffer: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    code_version: String,
    spec: ModelSpec,
    registry: Vec<String>,
    preprocess: PreprocessConfig,
    tensors: Vec<TensorEntry>,
    payload_bytes: u64,
    payload_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(model: &ClassifierModel, registry: &ClassRegistry, path: &Path) -> Result<()> {
    if registry.count() != model.spec.num_classes {
        return Err(Error::RegistryMismatch {
            checkpoint: model.spec.num_classes,
            registry: registry.count(),
        });
    }
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (_, p) in model.params.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape(),
            buffer: p.kind == ParamKind::Buffer,
        });
        for v in p.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        code_version: CODE_VERSION.to_string(),
        spec: model.spec.clone(),
        registry: registry.names().to_vec(),
        preprocess: model.preprocess.clone(),
        tensors,
        payload_bytes: payload.len() as u64,
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

/// Restores a model and the class ordering it was trained with.
pub fn load_checkpoint(path: &Path) -> Result<(ClassifierModel, ClassRegistry)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |m: &str| Error::CorruptCheckpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(corrupt("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(&format!("header: {e}")))?;
    let payload = &body[hlen..];
    if payload.len() as u64 != header.payload_bytes {
        return Err(corrupt("payload length mismatch"));
    }
    if hex(&Sha256::digest(payload)) != header.payload_sha256 {
        return Err(corrupt("payload checksum mismatch"));
    }
    let registry = ClassRegistry::new(header.registry.clone()).map_err(|e| corrupt(&e.to_string()))?;
    if registry.count() != header.spec.num_classes {
        return Err(Error::RegistryMismatch {
            checkpoint: header.spec.num_classes,
            registry: registry.count(),
        });
    }

    let mut model = ClassifierModel::init(header.spec.clone(), header.preprocess.clone(), 0);
    if model.params.len() != header.tensors.len() {
        return Err(corrupt("tensor count does not match architecture"));
    }
    let mut offset = 0usize;
    for entry in &header.tensors {
        let id = model
            .params
            .id(&entry.name)
            .ok_or_else(|| corrupt(&format!("unknown tensor {}", entry.name)))?;
        if model.params.get(id).shape() != entry.shape {
            return Err(corrupt(&format!("shape mismatch for {}", entry.name)));
        }
        let n: usize = entry.shape.iter().product();
        let end = offset + n * 4;
        if end > payload.len() {
            return Err(corrupt("payload too short"));
        }
        let data = payload[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *model.params.get_mut(id) = Tensor::from_vec(entry.shape, data);
        offset = end;
    }
    Ok((model, registry))
}

/// Loads a checkpoint that must agree with an expected class registry.
pub fn load_checkpoint_for(path: &Path, registry: &ClassRegistry) -> Result<ClassifierModel> {
    let (model, stored) = load_checkpoint(path)?;
    if stored.count() != registry.count() {
        return Err(Error::RegistryMismatch {
            checkpoint: stored.count(),
            registry: registry.count(),
        });
    }
    if stored != *registry {
        return Err(Error::InvalidRegistry(format!(
            "checkpoint classes {:?} differ from {:?}",
            stored.names(),
            registry.names()
        )));
    }
    Ok(model)
}
