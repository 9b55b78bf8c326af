//! Binary feature files.
//!
//! Layout, all little-endian:
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 6 | magic `SCAPF1` |
//! | 6 | 2 | version `u16`, currently 1 |
//! | 8 | 8 | count `u64` |
//! | 16 | 4 | dim `u32` |
//! | 20 | 4 | flags `u32`, bit 0 set when rows are unit-norm |
//! | 24 | 4·count·dim | `f32` values, row-major |
//! | 24 + 4·count·dim | 8·count | `u64` sample ids |
//!
//! Nothing may follow the id block.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 6] = *b"SCAPF1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;
pub const FLAG_UNIT_NORM: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected \"SCAPF1\"")]
    BadMagic { found: [u8; 6] },
    #[error("unsupported version {found}")]
    BadVersion { found: u16 },
    #[error("truncated {section}: needs bytes up to offset {needed}, file ends at {offset}")]
    TruncatedPayload {
        section: &'static str,
        offset: u64,
        needed: u64,
    },
    #[error("{extra} unexpected bytes after offset {offset}")]
    TrailingBytes { offset: u64, extra: u64 },
    #[error("declared size {count} x {dim} does not fit in memory")]
    SizeOverflow { count: u64, dim: u32 },
    #[error("payload has {found} values, header declares {expected}")]
    PayloadLength { expected: usize, found: usize },
}

/// In-memory feature file. Values stay 32-bit so a roundtrip is bitwise exact.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    dim: u32,
    pub flags: u32,
    values: Vec<f32>,
    ids: Vec<u64>,
}

impl FeatureFile {
    pub fn new(dim: u32, flags: u32, values: Vec<f32>, ids: Vec<u64>) -> Result<Self, FormatError> {
        let expected = ids.len().checked_mul(dim as usize).ok_or(FormatError::SizeOverflow {
            count: ids.len() as u64,
            dim,
        })?;
        if values.len() != expected {
            return Err(FormatError::PayloadLength {
                expected,
                found: values.len(),
            });
        }
        Ok(Self { dim, flags, values, ids })
    }

    /// Narrows 64-bit rows; `flags` gets bit 0 when every row has norm 1 within 1e-6.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], ids: Vec<u64>) -> Result<Self, FormatError> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * dim);
        let mut unit = true;
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(FormatError::PayloadLength {
                    expected: dim,
                    found: r.len(),
                });
            }
            values.extend(r.iter().map(|&x| x as f32));
            let n: f64 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            unit &= (n - 1.0).abs() < 1e-6;
        }
        let flags = if unit && !rows.is_empty() { FLAG_UNIT_NORM } else { 0 };
        Self::new(dim as u32, flags, values, ids)
    }

    pub fn count(&self) -> usize {
        self.ids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.values[i * d..(i + 1) * d]
    }

    pub fn unit_norm(&self) -> bool {
        self.flags & FLAG_UNIT_NORM != 0
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len() + 8 * self.ids.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.dim.to_le_bytes());
        out.extend_from_slice(&self.flags.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for id in &self.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let len = bytes.len() as u64;
        let need = |section, needed: u64| {
            if len < needed {
                Err(FormatError::TruncatedPayload {
                    section,
                    offset: len,
                    needed,
                })
            } else {
                Ok(())
            }
        };
        need("magic", 6)?;
        let magic: [u8; 6] = bytes[..6].try_into().unwrap();
        if magic != MAGIC {
            return Err(FormatError::BadMagic { found: magic });
        }
        need("header", HEADER_LEN as u64)?;
        let version = u16::from_le_bytes(bytes[6..8].try_into().unwrap());
        if version != VERSION {
            return Err(FormatError::BadVersion { found: version });
        }
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
        let flags = u32::from_le_bytes(bytes[20..24].try_into().unwrap());

        let overflow = FormatError::SizeOverflow { count, dim };
        let n_values = count.checked_mul(dim as u64).ok_or(overflow.clone())?;
        let values_end = n_values
            .checked_mul(4)
            .and_then(|b| b.checked_add(HEADER_LEN as u64))
            .ok_or(overflow.clone())?;
        let ids_end = count.checked_mul(8).and_then(|b| b.checked_add(values_end)).ok_or(overflow)?;
        need("feature values", values_end)?;
        need("sample ids", ids_end)?;
        if len > ids_end {
            return Err(FormatError::TrailingBytes {
                offset: ids_end,
                extra: len - ids_end,
            });
        }
        let values_end = values_end as usize;
        let values = bytes[HEADER_LEN..values_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let ids = bytes[values_end..]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(dim, flags, values, ids)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|source| Error::Format {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}
