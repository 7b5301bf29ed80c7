//! S2OT binary tensor files.
//!
//! Layout, all little-endian: the ASCII magic `S2OT`, a `u32` format
//! version (1), the four `u32` extents `Z, H, L, D`, then `Z·H·L·D` IEEE-754
//! `f32` values in row-major order.

use std::fs;
use std::path::Path;

use s2o_core::{Dims, Tensor4};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"S2OT";
pub const VERSION: u32 = 1;
/// Magic, version and four extents.
pub const HEADER_LEN: usize = 4 + 4 + 16;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("not an S2OT file")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("size mismatch: expected {expected} bytes, found {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("invalid extents: {0}")]
    InvalidDims(#[from] s2o_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub fn encode(t: &Tensor4) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.data().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for extent in t.dims().as_array() {
        let extent = u32::try_from(extent).expect("tensor extent exceeds u32");
        out.extend_from_slice(&extent.to_le_bytes());
    }
    for x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

pub fn decode(bytes: &[u8]) -> Result<Tensor4, FormatError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::SizeMismatch {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let [z, h, l, d] = [8, 12, 16, 20].map(|at| read_u32(bytes, at) as usize);
    let dims = Dims::new(z, h, l, d)?;
    let expected = dims
        .len()
        .checked_mul(4)
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or(FormatError::SizeMismatch {
            expected: usize::MAX,
            actual: bytes.len(),
        })?;
    if bytes.len() != expected {
        return Err(FormatError::SizeMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
        .collect();
    Ok(Tensor4::new(dims, data)?)
}

pub fn save_tensor_file(t: &Tensor4, path: impl AsRef<Path>) -> Result<(), FormatError> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_tensor_file(path: impl AsRef<Path>) -> Result<Tensor4, FormatError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}
