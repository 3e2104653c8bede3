//! WTS1 binary container format.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "WTS1" (4 bytes) | u32 version | u32 tensor_count
//! per tensor:
//!   u16 name_len | name (UTF-8)
//!   u8 dtype (0 = f32, 1 = f16)
//!   u32 rows | u32 cols
//!   payload: rows*cols elements, 4 or 2 bytes each
//! ```
//!
//! f16 payloads are promoted to f32 on load; the writer always emits f32.
//! Payloads containing NaN or infinity are rejected at load time.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use half::f16;
use thiserror::Error;

use crate::tensor::{TensorContainer, TensorError, WeightTensor};

pub const WTS1_MAGIC: [u8; 4] = *b"WTS1";
pub const WTS1_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F16: u8 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("not a WTS1 file: magic bytes {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("truncated file: declared sizes exceed file length")]
    TruncatedFile,
    #[error("payload of tensor '{name}' contains NaN/Inf at flat index {index}")]
    NonFinite { name: String, index: usize },
    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("invalid tensor in file: {0}")]
    InvalidTensor(#[from] TensorError),
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
}

/// Loads a WTS1 container, promoting f16 payloads to f32.
pub fn load_container(path: impl AsRef<Path>) -> Result<TensorContainer, IoError> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    decode_container(&bytes)
}

/// Saves a container; `load_container` reproduces it bit-exactly.
pub fn save_container(container: &TensorContainer, path: impl AsRef<Path>) -> Result<(), IoError> {
    let mut writer = BufWriter::new(File::create(path)?);
    writer.write_all(&encode_container(container))?;
    writer.flush()?;
    Ok(())
}

pub fn encode_container(container: &TensorContainer) -> Vec<u8> {
    let payload: usize = container
        .tensors()
        .iter()
        .map(|t| 15 + t.name().len() + t.len() * 4)
        .sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(&WTS1_MAGIC);
    out.extend_from_slice(&container.format_version.to_le_bytes());
    out.extend_from_slice(&(container.len() as u32).to_le_bytes());
    for t in container.tensors() {
        out.extend_from_slice(&(t.name().len() as u16).to_le_bytes());
        out.extend_from_slice(t.name().as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&t.rows().to_le_bytes());
        out.extend_from_slice(&t.cols().to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_container(bytes: &[u8]) -> Result<TensorContainer, IoError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take::<4>()?;
    if magic != WTS1_MAGIC {
        return Err(IoError::BadMagic(magic));
    }
    let version = cur.u32()?;
    let count = cur.u32()?;
    let mut tensors = Vec::with_capacity(count.min(1024) as usize);
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.slice(name_len)?)
            .map_err(|_| IoError::BadName)?
            .to_owned();
        let dtype = cur.u8()?;
        let rows = cur.u32()?;
        let cols = cur.u32()?;
        let n = rows as usize * cols as usize;
        // A hostile header can declare shapes whose byte size overflows.
        let payload_len = |per: usize| n.checked_mul(per).ok_or(IoError::TruncatedFile);
        let data = match dtype {
            DTYPE_F32 => {
                let raw = cur.slice(payload_len(4)?)?;
                raw.chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect::<Vec<_>>()
            }
            DTYPE_F16 => {
                let raw = cur.slice(payload_len(2)?)?;
                raw.chunks_exact(2)
                    .map(|b| f16::from_le_bytes([b[0], b[1]]).to_f32())
                    .collect::<Vec<_>>()
            }
            other => return Err(IoError::UnknownDtype(other)),
        };
        if let Some(index) = crate::tensor::first_non_finite(&data) {
            return Err(IoError::NonFinite { name, index });
        }
        tensors.push(WeightTensor::new(name, rows, cols, data)?);
    }
    Ok(TensorContainer::with_version(version, tensors)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn slice(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        let end = self.pos.checked_add(n).ok_or(IoError::TruncatedFile)?;
        if end > self.bytes.len() {
            return Err(IoError::TruncatedFile);
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N], IoError> {
        Ok(self.slice(N)?.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8, IoError> {
        Ok(self.take::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16, IoError> {
        Ok(u16::from_le_bytes(self.take()?))
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take()?))
    }
}
