//! Deterministic binary model checkpoints.
//!
//! Layout, bit-exact:
//!
//! ```text
//! bytes 0..4    magic "CCN1"
//! bytes 4..8    format version, u32 little-endian (currently 1)
//! bytes 8..16   header length in bytes, u64 little-endian
//! ...           header: UTF-8 JSON metadata
//! ...           payload: raw little-endian parameter values, header order
//! ```
//!
//! The header records the model config, fold id, seed, epoch, validation
//! score, and the ordered parameter name/shape/dtype list; each entry also
//! carries an FNV-1a 64 checksum of its payload slice so a payload that does
//! not match the header (truncation, reordering, corruption) is rejected
//! with a distinct error.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::{fnv1a64, hex64};
use crate::model::{build_model, Model, ModelConfig, ModelError};
use crate::train::Precision;

pub const MAGIC: [u8; 4] = *b"CCN1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("truncated payload: need {expected} bytes, got {got}")]
    TruncatedPayload { expected: usize, got: usize },
    #[error("payload length {got} does not match header shape sum {expected}")]
    ShapeSumMismatch { expected: usize, got: usize },
    #[error("checksum mismatch for parameter {name}")]
    ChecksumMismatch { name: String },
    #[error("header does not match the config's parameter layout: {0}")]
    HeaderMismatch(String),
    #[error("unknown dtype {0:?}")]
    BadDtype(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One parameter's header entry; order defines the payload layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub fnv64: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub fold_id: Option<u32>,
    pub seed: u64,
    pub epoch: usize,
    #[serde(with = "crate::data::f64_maybe_inf")]
    pub val_score: f64,
    pub params: Vec<ParamEntry>,
}

/// Run metadata stored alongside the weights.
#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub fold_id: Option<u32>,
    pub seed: u64,
    pub epoch: usize,
    pub val_score: f64,
    pub precision: Precision,
}

fn dtype_size(dtype: &str) -> Result<usize, CheckpointError> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(CheckpointError::BadDtype(other.to_string())),
    }
}

fn encode_values(values: &[f64], precision: Precision, out: &mut Vec<u8>) {
    match precision {
        Precision::F32 => {
            for &v in values {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Precision::F64 => {
            for &v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

fn decode_values(bytes: &[u8], dtype: &str) -> Vec<f64> {
    match dtype {
        "f32" => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        _ => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    }
}

/// Serializes a model. With [`Precision::F32`] the payload is exact only if
/// the values are f32-representable, which 32-bit training maintains.
pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta) -> Vec<u8> {
    let dtype = meta.precision.dtype().to_string();
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(model.params.len());
    for p in model.params.iter() {
        let start = payload.len();
        encode_values(&p.value.data, meta.precision, &mut payload);
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape.clone(),
            dtype: dtype.clone(),
            fnv64: hex64(fnv1a64(&payload[start..])),
        });
    }
    let header = CheckpointHeader {
        config: model.config.clone(),
        fold_id: meta.fold_id,
        seed: meta.seed,
        epoch: meta.epoch,
        val_score: meta.val_score,
        params: entries,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(16 + header_json.len() + payload.len());
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&payload);
    bytes
}

/// Parses and fully audits a checkpoint, returning the restored model and
/// its header.
pub fn load_checkpoint(bytes: &[u8]) -> Result<(Model, CheckpointHeader), CheckpointError> {
    if bytes.len() < 16 {
        return Err(CheckpointError::Header("file shorter than fixed fields".into()));
    }
    if bytes[0..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(CheckpointError::Header("declared header exceeds file".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let payload = &bytes[16 + header_len..];

    let mut expected = 0usize;
    for e in &header.params {
        expected += e.shape.iter().product::<usize>() * dtype_size(&e.dtype)?;
    }
    if payload.len() < expected {
        return Err(CheckpointError::TruncatedPayload {
            expected,
            got: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(CheckpointError::ShapeSumMismatch {
            expected,
            got: payload.len(),
        });
    }

    // rebuild the layout from the config, then audit the header against it
    let mut model = build_model(&header.config, header.seed)?;
    if model.params.len() != header.params.len() {
        return Err(CheckpointError::HeaderMismatch(format!(
            "config yields {} parameters, header lists {}",
            model.params.len(),
            header.params.len()
        )));
    }
    let mut offset = 0usize;
    let updates: Vec<Vec<f64>> = {
        let mut updates = Vec::with_capacity(header.params.len());
        for (built, entry) in model.params.iter().zip(&header.params) {
            if built.name != entry.name {
                return Err(CheckpointError::HeaderMismatch(format!(
                    "parameter order mismatch: expected {:?}, header has {:?}",
                    built.name, entry.name
                )));
            }
            if built.value.shape != entry.shape {
                return Err(CheckpointError::HeaderMismatch(format!(
                    "shape mismatch for {:?}: config {:?}, header {:?}",
                    entry.name, built.value.shape, entry.shape
                )));
            }
            let nbytes = built.value.numel() * dtype_size(&entry.dtype)?;
            let slice = &payload[offset..offset + nbytes];
            if hex64(fnv1a64(slice)) != entry.fnv64 {
                return Err(CheckpointError::ChecksumMismatch {
                    name: entry.name.clone(),
                });
            }
            updates.push(decode_values(slice, &entry.dtype));
            offset += nbytes;
        }
        updates
    };
    for (p, vals) in model.params.iter_mut().zip(updates) {
        p.value.data = vals;
    }
    Ok((model, header))
}

/// Short content id of a serialized checkpoint.
pub fn checkpoint_id(bytes: &[u8]) -> String {
    hex64(fnv1a64(bytes))
}
