//! `CEMB0001` binary embedding files.
//!
//! Layout, all little-endian:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 8    | magic `CEMB0001`                        |
//! | 8      | 4    | `dim` (u32, > 0)                        |
//! | 12     | 8    | `count` (u64)                           |
//! | 20     | 4    | dtype marker (u32): 1 = f32, 2 = f64    |
//! | 24     | …    | `count × dim` values, row-major         |
//!
//! Embedding dumps are always f32. Checkpoint tensors use the f64 marker so
//! that resumed training is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 8] = b"CEMB0001";
pub const HEADER_LEN: u64 = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    fn width(self) -> u64 {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn from_marker(m: u32) -> Option<Self> {
        match m {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }
}

/// Writes `x` as f32 rows. Values are rounded to the nearest f32.
pub fn write_embeddings(path: impl AsRef<Path>, x: &Matrix) -> Result<()> {
    write_with(path.as_ref(), x, DType::F32)
}

/// Writes `x` losslessly as f64 rows.
pub fn write_tensor(path: impl AsRef<Path>, x: &Matrix) -> Result<()> {
    write_with(path.as_ref(), x, DType::F64)
}

fn write_with(path: &Path, x: &Matrix, dtype: DType) -> Result<()> {
    if x.cols() == 0 {
        return Err(Error::Format {
            path: path.into(),
            msg: "embedding dimension must be positive".into(),
        });
    }
    if !x.is_finite() {
        return Err(Error::NonFinite(format!(
            "refusing to write non-finite values to {}",
            path.display()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(x.cols() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(x.rows() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(dtype as u32).to_le_bytes()).map_err(io)?;
    for &v in x.as_slice() {
        match dtype {
            DType::F32 => w.write_all(&(v as f32).to_le_bytes()),
            DType::F64 => w.write_all(&v.to_le_bytes()),
        }
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads an embedding or tensor file of either dtype.
pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let actual_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut r = BufReader::new(file);
    let fmt = |msg: String| Error::Format {
        path: path.into(),
        msg,
    };
    if actual_len < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.into(),
            expected: HEADER_LEN,
            actual: actual_len,
        });
    }
    let mut header = [0u8; HEADER_LEN as usize];
    r.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    if &header[0..8] != MAGIC {
        return Err(fmt(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&header[0..8]),
            std::str::from_utf8(MAGIC).unwrap()
        )));
    }
    let dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as u64;
    let count = u64::from_le_bytes(header[12..20].try_into().unwrap());
    let marker = u32::from_le_bytes(header[20..24].try_into().unwrap());
    let dtype = DType::from_marker(marker).ok_or_else(|| fmt(format!("unknown dtype marker {marker}")))?;
    if dim == 0 {
        return Err(fmt("embedding dimension is zero".into()));
    }
    let expected = count
        .checked_mul(dim)
        .and_then(|v| v.checked_mul(dtype.width()))
        .ok_or_else(|| fmt("count × dim overflows".into()))?;
    let payload = actual_len - HEADER_LEN;
    if payload != expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            actual: payload,
        });
    }
    let mut bytes = Vec::with_capacity(expected as usize);
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let data: Vec<f64> = match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Matrix::from_vec(count as usize, dim as usize, data)
}

pub(crate) fn write_u64s(path: &Path, values: &[u64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_u64s(path: &Path) -> Result<Vec<u64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Truncated {
            path: path.into(),
            expected: (bytes.len() as u64 / 8 + 1) * 8,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
