//! Named-tensor container used to import extractor weights.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic         4 bytes  "MDTF"
//! version       u32      currently 1
//! count         u32      number of tensor records
//! record × count:
//!   name_len    u32
//!   name        name_len bytes, UTF-8
//!   rank        u32
//!   dims        rank × u64
//!   payload     prod(dims) × f32
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::binio::{put_f32s, put_u32, put_u64, ByteReader};
use crate::error::{Error, LoadError, Result};

pub const TENSOR_FILE_MAGIC: [u8; 4] = *b"MDTF";
pub const TENSOR_FILE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "tensor `{name}`: dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { name, dims, data })
    }
}

pub fn encode_tensors(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&TENSOR_FILE_MAGIC);
    put_u32(&mut out, TENSOR_FILE_VERSION);
    put_u32(&mut out, tensors.len() as u32);
    for t in tensors {
        put_u32(&mut out, t.name.len() as u32);
        out.extend_from_slice(t.name.as_bytes());
        put_u32(&mut out, t.dims.len() as u32);
        for &d in &t.dims {
            put_u64(&mut out, d as u64);
        }
        put_f32s(&mut out, t.data.iter().copied());
    }
    out
}

/// Decodes a whole file; either every record parses or nothing is returned.
pub fn decode_tensors(bytes: &[u8]) -> std::result::Result<Vec<NamedTensor>, LoadError> {
    let mut r = ByteReader::new(bytes);
    r.magic(TENSOR_FILE_MAGIC)?;
    let version = r.u32()?;
    if version != TENSOR_FILE_VERSION {
        return Err(LoadError::VersionMismatch {
            expected: TENSOR_FILE_VERSION,
            found: version,
        });
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| LoadError::Malformed(format!("tensor name is not UTF-8: {e}")))?
            .to_owned();
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| LoadError::Malformed(format!("tensor `{name}` dims overflow")))?;
        let data = r.f32s(n)?;
        out.push(NamedTensor { name, dims, data });
    }
    if !r.is_at_end() {
        return Err(LoadError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.position()
        )));
    }
    Ok(out)
}

/// SHA-256 over the concatenated little-endian payloads, hex encoded.
pub fn payload_checksum(tensors: &[NamedTensor]) -> String {
    let mut h = Sha256::new();
    for t in tensors {
        for v in &t.data {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_tensor_file(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    fs::write(path, encode_tensors(tensors)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_tensors(&bytes)?)
}
