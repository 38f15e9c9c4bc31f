//! PRDS dataset files.
//!
//! Little-endian layout: magic `PRDS`, u16 version (1), u32 n, u8 ndim,
//! u32 dims[ndim] (per-sample), u32 C, f32 features (n × prod(dims)),
//! u16 labels (n), u32 CRC-32 over everything before it.

use std::path::Path;

use thiserror::Error;

use super::Dataset;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"PRDS";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("not a PRDS file (bad magic)")]
    BadMagic,
    #[error("unsupported PRDS version {0}")]
    BadVersion(u16),
    #[error("file size mismatch: expected {expected} bytes, found {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("checksum mismatch")]
    Checksum,
    #[error("invalid dataset: {0}")]
    Validation(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>, DatasetError> {
    let n = ds.len();
    let dims = ds.sample_dims();
    if ds.num_classes() > u16::MAX as usize + 1 {
        return Err(DatasetError::Validation("too many classes for u16 labels".into()));
    }
    let mut out = Vec::with_capacity(32 + n * (ds.features().cols() * 4 + 2));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(ds.num_classes() as u32).to_le_bytes());
    for &v in ds.features().data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &y in ds.labels() {
        out.extend_from_slice(&(y as u16).to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, DatasetError> {
    let short = |expected: usize| DatasetError::SizeMismatch { expected, actual: bytes.len() };
    if bytes.len() < 4 {
        return Err(short(4));
    }
    if bytes[..4] != MAGIC {
        return Err(DatasetError::BadMagic);
    }
    let fixed = 4 + 2 + 4 + 1;
    if bytes.len() < fixed {
        return Err(short(fixed));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(DatasetError::BadVersion(version));
    }
    let n = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let ndim = bytes[10] as usize;
    let header = fixed + 4 * ndim + 4;
    if bytes.len() < header {
        return Err(short(header));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let dims: Vec<usize> = (0..ndim).map(|i| u32_at(fixed + 4 * i)).collect();
    let classes = u32_at(fixed + 4 * ndim);
    let width = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| DatasetError::Validation("dims overflow".into()))?;
    let expected = n
        .checked_mul(width)
        .and_then(|f| f.checked_mul(4))
        .and_then(|f| f.checked_add(n * 2 + header + 4))
        .ok_or_else(|| DatasetError::Validation("size overflow".into()))?;
    if bytes.len() != expected {
        return Err(short(expected));
    }
    let body = &bytes[..expected - 4];
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(DatasetError::Checksum);
    }
    if n == 0 || ndim == 0 || width == 0 {
        return Err(DatasetError::Validation("empty dataset or zero dims".into()));
    }
    let feat_end = header + n * width * 4;
    let features: Vec<f64> = bytes[header..feat_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let labels: Vec<usize> = bytes[feat_end..expected - 4]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
        .collect();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(DatasetError::Validation(format!("label {bad} >= C = {classes}")));
    }
    let mut tdims = vec![n];
    tdims.extend_from_slice(&dims);
    let features = Tensor::new(tdims, features).map_err(|e| DatasetError::Validation(e.to_string()))?;
    Dataset::new(features, labels, classes).map_err(|e| DatasetError::Validation(e.to_string()))
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    std::fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    decode_dataset(&std::fs::read(path)?)
}
