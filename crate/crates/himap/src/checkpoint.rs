//! Binary checkpoint format.
//!
//! ```text
//! "HMAP" | version: u32 LE | header length: u64 LE | header (UTF-8 JSON) | payload
//! ```
//!
//! The header holds the model configuration and a tensor manifest
//! (`name`, `shape`, byte `offset` into the payload). The payload is every
//! tensor as little-endian `f64`, row-major, in manifest order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use himap_core::model::{ModelConfig, ModelParams};
use himap_core::Matrix;
use serde::{Deserialize, Serialize};

pub const MAGIC: [u8; 4] = *b"HMAP";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("cannot access {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: magic bytes {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("checkpoint version {found} is not supported (expected {VERSION})")]
    Version { found: u32 },
    #[error("checkpoint truncated in {section}: need {needed} bytes, have {available}")]
    Truncated {
        section: &'static str,
        needed: u64,
        available: u64,
    },
    #[error("checkpoint header is not valid JSON: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint manifest inconsistent: {0}")]
    Manifest(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

fn manifest(params: &ModelParams) -> Vec<TensorEntry> {
    let mut offset = 0u64;
    params
        .named_tensors()
        .into_iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name,
                shape: [t.rows(), t.cols()],
                offset,
            };
            offset += 8 * t.data().len() as u64;
            e
        })
        .collect()
}

pub fn encode(params: &ModelParams) -> Result<Vec<u8>, CheckpointError> {
    let header = Header {
        model: params.config.clone(),
        tensors: manifest(params),
    };
    let json = serde_json::to_vec(&header)?;
    let payload: usize = params.tensors().iter().map(|t| t.data().len() * 8).sum();
    let mut out = Vec::with_capacity(16 + json.len() + payload);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(
    bytes: &'a [u8],
    at: usize,
    len: u64,
    section: &'static str,
) -> Result<&'a [u8], CheckpointError> {
    let available = bytes.len().saturating_sub(at) as u64;
    if len > available {
        return Err(CheckpointError::Truncated {
            section,
            needed: len,
            available,
        });
    }
    Ok(&bytes[at..at + len as usize])
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams, CheckpointError> {
    let magic = take(bytes, 0, 4, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic {
            found: magic.to_vec(),
        });
    }
    let version = u32::from_le_bytes(take(bytes, 4, 4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let header_len = u64::from_le_bytes(take(bytes, 8, 8, "header length")?.try_into().expect("8 bytes"));
    let header: Header = serde_json::from_slice(take(bytes, 16, header_len, "header")?)?;
    let payload = &bytes[16 + header_len as usize..];

    header
        .model
        .validate()
        .map_err(|e| CheckpointError::Manifest(format!("model config: {e}")))?;
    let expected = ModelParams::zeros(&header.model)
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let expected_names = ModelParams::tensor_names(&header.model);
    if header.tensors.len() != expected_names.len() {
        return Err(CheckpointError::Manifest(format!(
            "{} tensors listed, model has {}",
            header.tensors.len(),
            expected_names.len()
        )));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut offset = 0u64;
    for ((entry, name), want) in header.tensors.iter().zip(&expected_names).zip(expected.tensors()) {
        if &entry.name != name {
            return Err(CheckpointError::Manifest(format!(
                "expected tensor `{name}`, found `{}`",
                entry.name
            )));
        }
        if entry.shape != [want.rows(), want.cols()] {
            return Err(CheckpointError::Manifest(format!(
                "`{name}` has shape {:?}, config implies {:?}",
                entry.shape,
                [want.rows(), want.cols()]
            )));
        }
        if entry.offset != offset {
            return Err(CheckpointError::Manifest(format!(
                "`{name}` at offset {}, expected {offset}",
                entry.offset
            )));
        }
        let len = 8 * (entry.shape[0] * entry.shape[1]) as u64;
        let raw = take(payload, offset as usize, len, "payload")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Matrix::from_vec(entry.shape[0], entry.shape[1], data).expect("shape checked"));
        offset += len;
    }
    if payload.len() as u64 != offset {
        return Err(CheckpointError::Manifest(format!(
            "{} trailing payload bytes",
            payload.len() as u64 - offset
        )));
    }
    ModelParams::from_tensors(&header.model, tensors)
        .map_err(|e| CheckpointError::Manifest(e.to_string()))
}

/// Reads only the JSON header.
pub fn read_header(bytes: &[u8]) -> Result<Header, CheckpointError> {
    let magic = take(bytes, 0, 4, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic {
            found: magic.to_vec(),
        });
    }
    let header_len = u64::from_le_bytes(take(bytes, 8, 8, "header length")?.try_into().expect("8 bytes"));
    Ok(serde_json::from_slice(take(bytes, 16, header_len, "header")?)?)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), CheckpointError> {
    let bytes = encode(params)?;
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}
