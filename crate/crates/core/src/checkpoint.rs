//! Tensor-dump checkpoint files.
//!
//! Layout:
//!
//! ```text
//! b"LBGNCKPT"                 8-byte magic
//! header_len: u64 LE
//! header: UTF-8 JSON          {"version", "kind", "dtype", "payload_sha256",
//!                              "tensors": [{"name","rows","cols","offset"}], "meta"}
//! payload                     little-endian f32 or f64 values, tensors in name order
//! ```
//!
//! JSON objects serialize with sorted keys, so equal states produce equal bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LBGNCKPT";
pub const FORMAT_VERSION: &str = "lbgen-ckpt/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: String,
    kind: String,
    dtype: Dtype,
    payload_sha256: String,
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

/// Named tensors plus JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorDump {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl TensorDump {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert_params(&mut self, prefix: &str, params: &ParamSet) {
        for (name, t) in params.iter() {
            self.tensors.insert(format!("{prefix}/{name}"), t.clone());
        }
    }

    /// All tensors under `prefix/`, with the prefix stripped.
    pub fn params(&self, prefix: &str) -> ParamSet {
        let p = format!("{prefix}/");
        let mut out = ParamSet::new();
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(&p) {
                out.insert(rest, t.clone());
            }
        }
        out
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}/");
        self.tensors.keys().any(|k| k.starts_with(&p))
    }

    pub fn to_bytes(&self, dtype: Dtype) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                rows: t.rows,
                cols: t.cols,
                offset: payload.len(),
            });
            for &v in &t.data {
                match dtype {
                    Dtype::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                    Dtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        let header = Header {
            version: FORMAT_VERSION.to_owned(),
            kind: self.kind.clone(),
            dtype,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
            tensors: entries,
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], expected_kind: &str, path: &Path) -> Result<Self> {
        let corrupt = |message: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            message: message.to_owned(),
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic; not an lbgen checkpoint"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| corrupt(&format!("unreadable header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                expected: FORMAT_VERSION.to_owned(),
                found: header.version,
            });
        }
        if header.kind != expected_kind {
            return Err(corrupt(&format!(
                "expected a `{expected_kind}` checkpoint, found `{}`",
                header.kind
            )));
        }
        let payload = &bytes[header_end..];
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(corrupt("payload checksum mismatch"));
        }
        let w = header.dtype.width();
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let n = e.rows * e.cols;
            let end = e.offset + n * w;
            if end > payload.len() {
                return Err(corrupt(&format!("tensor `{}` exceeds payload", e.name)));
            }
            let data = payload[e.offset..end]
                .chunks_exact(w)
                .map(|c| match header.dtype {
                    Dtype::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                    Dtype::F64 => f64::from_le_bytes(c.try_into().unwrap()),
                })
                .collect();
            tensors.insert(e.name, Tensor::new(e.rows, e.cols, data));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    /// Write atomically: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path, dtype: Dtype) -> Result<()> {
        write_atomic(path, &self.to_bytes(dtype))
    }

    pub fn load(path: &Path, expected_kind: &str) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected_kind, path)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = {
        let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".tmp");
        path.with_file_name(name)
    };
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
