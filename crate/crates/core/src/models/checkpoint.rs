//! Named-array container shared by model checkpoints and training state.
//!
//! ```text
//! magic (8 bytes) | u64 header_len | header JSON (utf-8)
//! for each array listed in header.arrays: rows·cols × f64, little-endian, row-major
//! ```

use std::fs;
use std::path::Path;

use rob_tensor::Matrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, RobError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct ArraySpec {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    meta: serde_json::Value,
    arrays: Vec<ArraySpec>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| RobError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn encode_arrays(
    magic: &[u8; 8],
    meta: serde_json::Value,
    arrays: &[(&str, &Matrix)],
) -> Vec<u8> {
    let envelope = Envelope {
        meta,
        arrays: arrays
            .iter()
            .map(|(n, m)| ArraySpec {
                name: n.to_string(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&envelope).expect("header serializes");
    let body: usize = arrays.iter().map(|(_, m)| m.len() * 8).sum();
    let mut out = Vec::with_capacity(16 + header.len() + body);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, m) in arrays {
        out.extend_from_slice(&m.to_le_bytes());
    }
    out
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file. Returns the SHA-256 of the written bytes.
pub fn write_arrays(
    path: &Path,
    magic: &[u8; 8],
    meta: serde_json::Value,
    arrays: &[(&str, &Matrix)],
) -> Result<String> {
    let bytes = encode_arrays(magic, meta, arrays);
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &bytes).map_err(|e| RobError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| RobError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn decode_arrays(
    bytes: &[u8],
    magic: &[u8; 8],
    what: &'static str,
) -> Result<(serde_json::Value, Vec<(String, Matrix)>)> {
    let bad = |reason: String| RobError::Format { what, reason };
    if bytes.len() < 16 || &bytes[..8] != magic {
        return Err(bad("bad magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header".into()))?;
    let envelope: Envelope =
        serde_json::from_slice(&bytes[16..body_start]).map_err(|e| bad(format!("header: {e}")))?;
    let mut pos = body_start;
    let mut arrays = Vec::with_capacity(envelope.arrays.len());
    for spec in envelope.arrays {
        let n = spec.rows * spec.cols * 8;
        if pos + n > bytes.len() {
            return Err(bad(format!("array {} truncated", spec.name)));
        }
        let data = bytes[pos..pos + n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        pos += n;
        arrays.push((spec.name, Matrix::from_vec(spec.rows, spec.cols, data)?));
    }
    if pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok((envelope.meta, arrays))
}

pub fn read_arrays(
    path: &Path,
    magic: &[u8; 8],
    what: &'static str,
) -> Result<(serde_json::Value, Vec<(String, Matrix)>, String)> {
    let bytes = fs::read(path).map_err(|e| RobError::io(path, e))?;
    let (meta, arrays) = decode_arrays(&bytes, magic, what)?;
    Ok((meta, arrays, sha256_hex(&bytes)))
}
