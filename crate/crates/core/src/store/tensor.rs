//! Binary tensor files.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic "SLNS" | u32 version | u8 dtype | u32 rank | u64 dims[rank] | data
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SLNS";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    F64 = 2,
    U8 = 3,
    U32 = 4,
    U64 = 5,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 | DType::U32 => 4,
            DType::F64 | DType::U64 => 8,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => DType::F32,
            2 => DType::F64,
            3 => DType::U8,
            4 => DType::U32,
            5 => DType::U64,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U32(Vec<u32>),
    U64(Vec<u64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
            TensorData::U32(_) => DType::U32,
            TensorData::U64(_) => DType::U64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::U32(v) => v.len(),
            TensorData::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<u64>,
    pub data: TensorData,
}

macro_rules! accessor {
    ($name:ident, $variant:ident, $ty:ty) => {
        pub fn $name(self) -> Result<Vec<$ty>> {
            match self.data {
                TensorData::$variant(v) => Ok(v),
                other => Err(Error::invalid(format!(
                    "expected {:?} tensor, found {:?}",
                    DType::$variant,
                    other.dtype()
                ))),
            }
        }
    };
}

impl Tensor {
    pub fn new(shape: &[usize], data: TensorData) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} holds {n} elements, data has {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.iter().map(|&d| d as u64).collect(),
            data,
        })
    }

    pub fn f64(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::new(shape, TensorData::F64(data))
    }

    pub fn f32(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn u8(shape: &[usize], data: Vec<u8>) -> Result<Self> {
        Self::new(shape, TensorData::U8(data))
    }

    pub fn u32(shape: &[usize], data: Vec<u32>) -> Result<Self> {
        Self::new(shape, TensorData::U32(data))
    }

    pub fn u64(shape: &[usize], data: Vec<u64>) -> Result<Self> {
        Self::new(shape, TensorData::U64(data))
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.shape.iter().map(|&d| d as usize).collect()
    }

    accessor!(into_f64, F64, f64);
    accessor!(into_f32, F32, f32);
    accessor!(into_u8, U8, u8);
    accessor!(into_u32, U32, u32);
    accessor!(into_u64, U64, u64);

    pub fn header_len(rank: usize) -> usize {
        4 + 4 + 1 + 4 + 8 * rank
    }

    pub fn encode(&self) -> Vec<u8> {
        let n = self.data.len();
        let mut out = Vec::with_capacity(Self::header_len(self.shape.len()) + n * self.dtype().size());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.dtype() as u8);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for d in &self.shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    /// Parses a tensor file. Any truncation, bad magic or length mismatch
    /// is reported as an integrity error carrying the offending offset.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let need = |offset: usize, len: usize, what: &str| -> Result<()> {
            if bytes.len() < offset + len {
                Err(Error::integrity(
                    path,
                    bytes.len() as u64,
                    format!("file truncated while reading {what}"),
                ))
            } else {
                Ok(())
            }
        };
        need(0, 4, "magic")?;
        if &bytes[..4] != MAGIC {
            return Err(Error::integrity(path, 0, "bad magic"));
        }
        need(4, 4, "version")?;
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::integrity(path, 4, format!("unsupported version {version}")));
        }
        need(8, 1, "dtype")?;
        let dtype = DType::from_code(bytes[8])
            .ok_or_else(|| Error::integrity(path, 8, format!("unknown dtype code {}", bytes[8])))?;
        need(9, 4, "rank")?;
        let rank = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes")) as usize;
        need(13, 8 * rank, "dims")?;
        let mut shape = Vec::with_capacity(rank);
        let mut count: u64 = 1;
        for i in 0..rank {
            let off = 13 + 8 * i;
            let d = u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"));
            count = count
                .checked_mul(d)
                .ok_or_else(|| Error::integrity(path, off as u64, "dimension overflow"))?;
            shape.push(d);
        }
        let start = Self::header_len(rank);
        let expected = count
            .checked_mul(dtype.size() as u64)
            .and_then(|b| b.checked_add(start as u64))
            .ok_or_else(|| Error::integrity(path, 13, "size overflow"))?;
        if bytes.len() as u64 != expected {
            return Err(Error::integrity(
                path,
                (bytes.len() as u64).min(expected),
                format!("header declares {expected} bytes, file has {}", bytes.len()),
            ));
        }
        let body = &bytes[start..];
        let n = count as usize;
        let data = match dtype {
            DType::U8 => TensorData::U8(body.to_vec()),
            DType::F32 => TensorData::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            DType::U32 => TensorData::U32(
                body.chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                body.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            DType::U64 => TensorData::U64(
                body.chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
        };
        debug_assert_eq!(data.len(), n);
        Ok(Self { shape, data })
    }
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    super::atomic_write(path, &tensor.encode())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    Tensor::decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::f32(&[2, 1], vec![1.0, -2.0]).unwrap();
        let bytes = t.encode();
        assert_eq!(&bytes[..4], b"SLNS");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(bytes[8], 1);
        assert_eq!(&bytes[9..13], &2u32.to_le_bytes());
        assert_eq!(&bytes[13..21], &2u64.to_le_bytes());
        assert_eq!(&bytes[21..29], &1u64.to_le_bytes());
        assert_eq!(&bytes[29..33], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 37);
    }

    #[test]
    fn truncation_reports_offset() {
        let t = Tensor::f64(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut bytes = t.encode();
        bytes.truncate(bytes.len() - 3);
        match Tensor::decode(&bytes, Path::new("x.bin")) {
            Err(Error::Integrity { offset, .. }) => assert_eq!(offset, bytes.len() as u64),
            other => panic!("expected integrity error, got {other:?}"),
        }
        assert!(matches!(
            Tensor::decode(b"NOPE", Path::new("x.bin")),
            Err(Error::Integrity { offset: 0, .. })
        ));
        assert!(matches!(
            Tensor::decode(b"SL", Path::new("x.bin")),
            Err(Error::Integrity { .. })
        ));
    }
}
