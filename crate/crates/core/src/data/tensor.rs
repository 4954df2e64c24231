//! The `DGT1` tensor container.
//!
//! Layout, all little-endian: the 4 magic bytes `DGT1`, a `u32` rank, `rank`
//! `u64` extents, then `prod(extents)` IEEE-754 binary64 values in row-major
//! order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::DataError;

pub const TENSOR_MAGIC: &[u8; 4] = b"DGT1";

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl TensorRecord {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self, DataError> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(DataError::InvalidTensor(format!(
                "dims must be non-empty with positive extents, got {dims:?}"
            )));
        }
        let expected = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| DataError::InvalidTensor(format!("dims {dims:?} overflow")))?;
        if expected != data.len() {
            return Err(DataError::InvalidTensor(format!(
                "dims {dims:?} imply {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn vector(data: Vec<f64>) -> Result<Self, DataError> {
        Self::new(vec![data.len()], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Number of bytes `write_to` will produce.
    pub fn encoded_len(&self) -> usize {
        4 + 4 + 8 * self.dims.len() + 8 * self.data.len()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for &d in &self.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(8 * self.data.len());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Reads one record from the front of `r`.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, DataError> {
        let mut magic = [0u8; 4];
        read_exact_or(r, &mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(DataError::BadMagic {
                expected: String::from_utf8_lossy(TENSOR_MAGIC).into_owned(),
                found: String::from_utf8_lossy(&magic).into_owned(),
            });
        }
        let mut word = [0u8; 4];
        read_exact_or(r, &mut word)?;
        let ndim = u32::from_le_bytes(word) as usize;
        let mut dims = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            let mut ext = [0u8; 8];
            read_exact_or(r, &mut ext)?;
            dims.push(usize::try_from(u64::from_le_bytes(ext)).map_err(|_| {
                DataError::InvalidTensor("extent does not fit in memory".to_string())
            })?);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|_| !dims.is_empty() && !dims.contains(&0))
            .ok_or_else(|| DataError::InvalidTensor(format!("bad dims {dims:?}")))?;
        let mut payload = Vec::new();
        r.take(8 * count as u64)
            .read_to_end(&mut payload)
            .map_err(|e| DataError::Io {
                path: String::new(),
                source: e,
            })?;
        if payload.len() < 8 * count {
            return Err(DataError::LengthMismatch {
                expected: 8 * count,
                found: payload.len(),
            });
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(dims, data)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        Self::read_from(&mut &bytes[..])
    }
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), DataError> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(DataError::LengthMismatch {
                    expected: buf.len(),
                    found: filled,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => {
                return Err(DataError::Io {
                    path: String::new(),
                    source: e,
                })
            }
        }
    }
    Ok(())
}

pub fn write_tensor(record: &TensorRecord, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, record.to_bytes()).map_err(|e| DataError::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorRecord, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    TensorRecord::from_bytes(&bytes)
}
