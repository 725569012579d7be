//! DT4 tensor files.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | field                              |
//! |--------|------|------------------------------------|
//! | 0      | 4    | magic `DT4\0`                      |
//! | 4      | 32   | dims `n, c, h, w` as `u64`         |
//! | 36     | 1    | dtype code: 4 = f32, 8 = f64       |
//! | 37     | ...  | `n*c*h*w` elements, row-major      |

use std::fs;
use std::path::Path;

use super::{Shape, Tensor4};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"DT4\0";
const HEADER_LEN: usize = 4 + 32 + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            4 => Ok(Dtype::F32),
            8 => Ok(Dtype::F64),
            other => Err(Error::BadDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        self.code() as usize
    }
}

/// Serializes `t`; with `Dtype::F32` every element is rounded to single precision.
pub fn encode(t: &Tensor4, dtype: Dtype) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + t.numel() * dtype.size());
    buf.extend_from_slice(&MAGIC);
    for d in t.shape().dims() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    buf.push(dtype.code());
    match dtype {
        Dtype::F32 => t
            .data()
            .iter()
            .for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => t
            .data()
            .iter()
            .for_each(|&v| buf.extend_from_slice(&v.to_le_bytes())),
    }
    buf
}

/// Parses a DT4 buffer, returning the tensor and the stored dtype.
pub fn decode(bytes: &[u8]) -> Result<(Tensor4, Dtype)> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let mut dims = [0u64; 4];
    for (k, d) in dims.iter_mut().enumerate() {
        *d = u64::from_le_bytes(bytes[4 + 8 * k..12 + 8 * k].try_into().unwrap());
    }
    let dtype = Dtype::from_code(bytes[36])?;
    let payload = &bytes[HEADER_LEN..];

    let mismatch = || Error::DimMismatch {
        dims,
        payload_bytes: payload.len(),
    };
    if dims.contains(&0) {
        return Err(mismatch());
    }
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(usize::try_from(d).ok()?))
        .ok_or_else(mismatch)?;
    let expected = numel.checked_mul(dtype.size()).ok_or_else(mismatch)?;
    if payload.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(mismatch());
    }

    let data: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect(),
    };
    let shape = Shape::new(
        dims[0] as usize,
        dims[1] as usize,
        dims[2] as usize,
        dims[3] as usize,
    );
    Ok((Tensor4::new(shape, data)?, dtype))
}

pub fn write_dt4(path: impl AsRef<Path>, t: &Tensor4, dtype: Dtype) -> Result<()> {
    fs::write(path, encode(t, dtype))?;
    Ok(())
}

pub fn read_dt4(path: impl AsRef<Path>) -> Result<Tensor4> {
    Ok(decode(&fs::read(path)?)?.0)
}
