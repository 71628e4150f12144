//! `.xmrt` tensor container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes       | content                         |
//! |-------------|---------------------------------|
//! | 4           | magic `XMRT`                    |
//! | 2           | format version (u16, = 1)       |
//! | 1           | rank (u8)                       |
//! | 8 x rank    | dims (u64 each)                 |
//! | 8 x product | f64 payload, row-major          |
//! | 4           | CRC32 (IEEE) of the payload     |

use std::fs;
use std::path::Path;

use thiserror::Error;
use xmrt_core::DenseMatrix;

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"XMRT";
pub const VERSION: u16 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TensorError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    Version(u16),
    #[error("expected rank {expected}, file has rank {found}")]
    Rank { expected: u8, found: u8 },
    #[error("dims {0:?} overflow the addressable size")]
    Dims(Vec<u64>),
    #[error("file is {found} bytes, layout needs {expected}")]
    Length { expected: u64, found: u64 },
    #[error("payload checksum {found:08x} does not match stored {stored:08x}")]
    Crc { stored: u32, found: u32 },
    #[error("tensor contains a non-finite value")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn encode(&self) -> Result<Vec<u8>, TensorError> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite);
        }
        let rank = u8::try_from(self.dims.len())
            .map_err(|_| TensorError::Dims(self.dims.iter().map(|&d| d as u64).collect()))?;
        let count: usize = self.dims.iter().product();
        if count != self.data.len() {
            return Err(TensorError::Length { expected: count as u64 * 8, found: self.data.len() as u64 * 8 });
        }
        let mut out = Vec::with_capacity(7 + 8 * self.dims.len() + 8 * count + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(rank);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let start = out.len();
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TensorError> {
        let short = |need: u64| TensorError::Length { expected: need, found: bytes.len() as u64 };
        if bytes.len() < 7 {
            return Err(short(7));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if &magic != MAGIC {
            return Err(TensorError::BadMagic(magic));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(TensorError::Version(version));
        }
        let rank = bytes[6] as usize;
        let header = 7 + 8 * rank;
        if bytes.len() < header {
            return Err(short(header as u64));
        }
        let raw: Vec<u64> =
            (0..rank).map(|i| u64::from_le_bytes(bytes[7 + 8 * i..15 + 8 * i].try_into().unwrap())).collect();
        let count =
            raw.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d)).ok_or_else(|| TensorError::Dims(raw.clone()))?;
        let total = count
            .checked_mul(8)
            .and_then(|p| p.checked_add(header as u64 + 4))
            .ok_or_else(|| TensorError::Dims(raw.clone()))?;
        if bytes.len() as u64 != total {
            return Err(short(total));
        }
        let payload = &bytes[header..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let found = crc32fast::hash(payload);
        if stored != found {
            return Err(TensorError::Crc { stored, found });
        }
        let data: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite);
        }
        Ok(Self { dims: raw.iter().map(|&d| d as usize).collect(), data })
    }
}

pub fn save_tensor(path: &Path, tensor: &Tensor) -> CliResult<()> {
    let bytes = tensor.encode().map_err(|source| CliError::Tensor { path: path.into(), source })?;
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn load_tensor(path: &Path) -> CliResult<Tensor> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Tensor::decode(&bytes).map_err(|source| CliError::Tensor { path: path.into(), source })
}

pub fn save_matrix(path: &Path, m: &DenseMatrix) -> CliResult<()> {
    save_tensor(path, &Tensor { dims: vec![m.rows(), m.cols()], data: m.values().to_vec() })
}

pub fn load_matrix(path: &Path) -> CliResult<DenseMatrix> {
    let t = load_tensor(path)?;
    if t.dims.len() != 2 {
        let source = TensorError::Rank { expected: 2, found: t.dims.len() as u8 };
        return Err(CliError::Tensor { path: path.into(), source });
    }
    Ok(DenseMatrix::new(t.dims[0], t.dims[1], t.data)?)
}
