//! Minimal tensor-container reader/writer.
//!
//! The on-disk layout is: an 8-byte little-endian header length, a UTF-8
//! JSON header mapping tensor name to `{dtype, shape, data_offsets}`, then
//! the raw little-endian payloads. Offsets are relative to the start of the
//! data section. Reads accept F16, BF16, F32 and F64; everything is widened
//! to f64 in memory, and writes always emit F64.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F16,
    BF16,
    F32,
    F64,
}

impl Dtype {
    fn byte_width(self) -> usize {
        match self {
            Dtype::F16 | Dtype::BF16 => 2,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeaderEntry {
    dtype: Dtype,
    shape: Vec<usize>,
    data_offsets: (usize, usize),
}

/// A 2-D tensor widened to f64, as read from a container file.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major values, `rows * cols` entries.
    pub values: Vec<f64>,
}

impl Matrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

fn f16_to_f64(bits: u16) -> f64 {
    let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = ((bits >> 10) & 0x1f) as i32;
    let man = (bits & 0x3ff) as f64;
    match exp {
        0 => sign * man * 2f64.powi(-24),
        0x1f => {
            if man == 0.0 {
                sign * f64::INFINITY
            } else {
                f64::NAN
            }
        }
        _ => sign * (1.0 + man / 1024.0) * 2f64.powi(exp - 15),
    }
}

fn bf16_to_f64(bits: u16) -> f64 {
    f32::from_bits((bits as u32) << 16) as f64
}

fn parse_header(bytes: &[u8]) -> Result<(BTreeMap<String, TensorHeaderEntry>, usize)> {
    if bytes.len() < 8 {
        return Err(Error::TensorFormat("file shorter than header length".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let data_start = 8 + header_len;
    if bytes.len() < data_start {
        return Err(Error::TensorFormat("truncated JSON header".into()));
    }
    let header_json = std::str::from_utf8(&bytes[8..data_start])
        .map_err(|e| Error::TensorFormat(format!("header not UTF-8: {e}")))?;
    let raw: BTreeMap<String, serde_json::Value> = serde_json::from_str(header_json)
        .map_err(|e| Error::TensorFormat(format!("header not valid JSON: {e}")))?;
    let mut entries = BTreeMap::new();
    for (name, value) in raw {
        if name == "__metadata__" {
            continue;
        }
        let entry: TensorHeaderEntry = serde_json::from_value(value)
            .map_err(|e| Error::TensorFormat(format!("tensor {name:?}: {e}")))?;
        entries.insert(name, entry);
    }
    Ok((entries, data_start))
}

/// List the tensor names present in a container file.
pub fn tensor_names(path: &Path) -> Result<Vec<String>> {
    let bytes = std::fs::read(path)?;
    let (entries, _) = parse_header(&bytes)?;
    Ok(entries.into_keys().collect())
}

/// Read one 2-D tensor from a container file, widening values to f64.
pub fn read_matrix(path: &Path, name: &str) -> Result<Matrix> {
    let bytes = std::fs::read(path)?;
    read_matrix_bytes(&bytes, name)
}

pub fn read_matrix_bytes(bytes: &[u8], name: &str) -> Result<Matrix> {
    let (entries, data_start) = parse_header(bytes)?;
    let entry = entries
        .get(name)
        .ok_or_else(|| Error::TensorNotFound(name.to_string()))?;
    if entry.shape.len() != 2 {
        return Err(Error::TensorFormat(format!(
            "tensor {name:?} has rank {}, expected 2",
            entry.shape.len()
        )));
    }
    let (rows, cols) = (entry.shape[0], entry.shape[1]);
    let count = rows * cols;
    let (start, end) = entry.data_offsets;
    let expected = count * entry.dtype.byte_width();
    if end < start || end - start != expected {
        return Err(Error::TensorFormat(format!(
            "tensor {name:?} payload is {} bytes, expected {expected}",
            end.saturating_sub(start)
        )));
    }
    let payload = bytes
        .get(data_start + start..data_start + end)
        .ok_or_else(|| Error::TensorFormat("data offsets out of bounds".into()))?;

    let mut values = Vec::with_capacity(count);
    match entry.dtype {
        Dtype::F16 => {
            for chunk in payload.chunks_exact(2) {
                values.push(f16_to_f64(u16::from_le_bytes([chunk[0], chunk[1]])));
            }
        }
        Dtype::BF16 => {
            for chunk in payload.chunks_exact(2) {
                values.push(bf16_to_f64(u16::from_le_bytes([chunk[0], chunk[1]])));
            }
        }
        Dtype::F32 => {
            for chunk in payload.chunks_exact(4) {
                values.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
        }
        Dtype::F64 => {
            for chunk in payload.chunks_exact(8) {
                values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
    }
    Ok(Matrix { rows, cols, values })
}

/// Serialize matrices into container bytes. Tensors are laid out in
/// name-sorted order and the header is padded to 8-byte alignment, so the
/// output is deterministic for a given input.
pub fn write_matrices(tensors: &BTreeMap<String, Matrix>) -> Vec<u8> {
    let mut header = BTreeMap::new();
    let mut offset = 0usize;
    for (name, m) in tensors {
        let nbytes = m.values.len() * 8;
        header.insert(
            name.clone(),
            TensorHeaderEntry {
                dtype: Dtype::F64,
                shape: vec![m.rows, m.cols],
                data_offsets: (offset, offset + nbytes),
            },
        );
        offset += nbytes;
    }
    let mut header_json = serde_json::to_string(&header).expect("header serializes");
    while (8 + header_json.len()) % 8 != 0 {
        header_json.push(' ');
    }

    let mut out = Vec::with_capacity(8 + header_json.len() + offset);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(header_json.as_bytes());
    for m in tensors.values() {
        for v in &m.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_matrix_file(path: &Path, name: &str, matrix: &Matrix) -> Result<()> {
    let mut map = BTreeMap::new();
    map.insert(name.to_string(), matrix.clone());
    std::fs::write(path, write_matrices(&map))?;
    Ok(())
}
