//! Binary tensor files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes        | content                              |
//! |--------------|--------------------------------------|
//! | 4            | magic `SMT1`                         |
//! | 1            | dtype code: 0 = f32, 1 = f64         |
//! | 1            | number of dims `n`                   |
//! | 4 · n        | dims as `u32`                        |
//! | rest         | row-major element data               |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"SMT1";

pub fn encode<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE as u8);
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// A tensor of whichever element type the file declared.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    /// Converts to `T`, rounding or widening if the stored type differs.
    pub fn into_real<T: Real>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

fn decode_as<T: Real>(body: &[u8], dims: &[usize], path: &Path) -> Result<Tensor<T>> {
    let width = T::DTYPE.size();
    let data = body.chunks_exact(width).map(T::read_le).collect();
    Tensor::new(dims, data).map_err(|e| Error::format(path, e.to_string()))
}

/// Parses an encoded tensor; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<AnyTensor> {
    if bytes.len() < 6 {
        return Err(Error::format(path, "file shorter than header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let dtype = DType::from_code(bytes[4])
        .ok_or_else(|| Error::format(path, format!("unknown dtype code {}", bytes[4])))?;
    let ndim = bytes[5] as usize;
    if ndim == 0 {
        return Err(Error::format(path, "zero dims"));
    }
    let header = 6 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::format(path, "truncated dims"));
    }
    let dims: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(path, "dims overflow"))?;
    let body = &bytes[header..];
    if body.len() != count * dtype.size() {
        return Err(Error::format(
            path,
            format!(
                "expected {} data bytes for dims {dims:?}, found {}",
                count * dtype.size(),
                body.len()
            ),
        ));
    }
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode_as(body, &dims, path)?),
        DType::F64 => AnyTensor::F64(decode_as(body, &dims, path)?),
    })
}

/// Writes through a sibling temp file and renames, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_tensor<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    write_atomic(path, &encode(t))
}

pub fn read_any(path: &Path) -> Result<AnyTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Reads a tensor that must have been stored as `T`.
pub fn read_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let any = read_any(path)?;
    if any.dtype() != T::DTYPE {
        return Err(Error::format(
            path,
            format!("stored as {:?}, requested {:?}", any.dtype(), T::DTYPE),
        ));
    }
    Ok(any.into_real())
}
