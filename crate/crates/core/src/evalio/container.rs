//! `HAD1` binary container for named tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "HAD1"                      4 bytes magic
//! u32  record count
//! per record:
//!   u16  name length, then the UTF-8 name bytes
//!   u8   dtype tag (0 = f32, 1 = f64, 2 = u8)
//!   u8   ndim, then ndim x u32 dimensions
//!   payload: element size x product(dims) bytes, row-major, little-endian
//! ```
//!
//! A 0-d record (ndim 0) holds exactly one element.

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::numerics::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"HAD1";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic {0:?}, expected \"HAD1\"")]
    BadMagic([u8; 4]),
    #[error("truncated container: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("duplicate record name {0:?}")]
    DuplicateName(String),
    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),
    #[error("record name is not valid UTF-8")]
    InvalidName,
    #[error("{0} trailing bytes after the last record")]
    TrailingBytes(usize),
    #[error("record {name:?} does not fit the format: {reason}")]
    Unrepresentable { name: String, reason: String },
    #[error("payload of {name:?} has {got} elements, shape needs {expected}")]
    PayloadLength { name: String, expected: usize, got: usize },
    #[error("no record named {0:?}")]
    Missing(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    U8,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::U8 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self, ContainerError> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            2 => Ok(Dtype::U8),
            t => Err(ContainerError::UnknownDtype(t)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
            TensorData::U8(_) => Dtype::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One named tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: TensorData) -> Result<Self, ContainerError> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(ContainerError::PayloadLength {
                name,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { name, shape, data })
    }

    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let data = TensorData::F64(t.data().iter().map(|v| v.to_f64_lossy()).collect());
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            data,
        }
    }

    /// Converts any dtype to a floating tensor; `f32` widens losslessly.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data: Vec<T> = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::lit(x)).collect(),
            TensorData::U8(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
        };
        Tensor::new(self.shape.clone(), data).expect("record invariant")
    }
}

/// Ordered set of uniquely named records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    records: Vec<TensorRecord>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: Vec<TensorRecord>) -> Result<Self, ContainerError> {
        let mut c = Self::new();
        for r in records {
            c.push(r)?;
        }
        Ok(c)
    }

    pub fn push(&mut self, record: TensorRecord) -> Result<(), ContainerError> {
        if self.get(&record.name).is_some() {
            return Err(ContainerError::DuplicateName(record.name));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn push_tensor<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) -> Result<(), ContainerError> {
        self.push(TensorRecord::from_tensor(name, t))
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&TensorRecord, ContainerError> {
        self.get(name).ok_or_else(|| ContainerError::Missing(name.to_string()))
    }

    pub fn records(&self) -> &[TensorRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ContainerError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let count = u32::try_from(self.records.len()).map_err(|_| ContainerError::Unrepresentable {
            name: String::new(),
            reason: "more than u32::MAX records".into(),
        })?;
        out.extend_from_slice(&count.to_le_bytes());
        for r in &self.records {
            let bad = |reason: &str| ContainerError::Unrepresentable {
                name: r.name.clone(),
                reason: reason.to_string(),
            };
            let name_len = u16::try_from(r.name.len()).map_err(|_| bad("name longer than 65535 bytes"))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.data.dtype().tag());
            let ndim = u8::try_from(r.shape.len()).map_err(|_| bad("more than 255 dimensions"))?;
            out.push(ndim);
            for &d in &r.shape {
                let d = u32::try_from(d).map_err(|_| bad("dimension exceeds u32"))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &r.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U8(v) => out.extend_from_slice(v),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let mut rd = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = rd.take(4)?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(ContainerError::BadMagic(magic));
        }
        let count = rd.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        let mut seen = HashSet::new();
        for _ in 0..count {
            let name_len = rd.u16()? as usize;
            let name = std::str::from_utf8(rd.take(name_len)?)
                .map_err(|_| ContainerError::InvalidName)?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(ContainerError::DuplicateName(name));
            }
            let dtype = Dtype::from_tag(rd.u8()?)?;
            let ndim = rd.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(rd.u32()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| ContainerError::Unrepresentable {
                    name: name.clone(),
                    reason: "element count overflows".into(),
                })?;
            let nbytes = n.checked_mul(dtype.size()).ok_or(ContainerError::Truncated {
                offset: rd.pos,
                needed: usize::MAX,
                available: bytes.len() - rd.pos,
            })?;
            let payload = rd.take(nbytes)?;
            let data = match dtype {
                Dtype::F32 => TensorData::F32(
                    payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                Dtype::F64 => TensorData::F64(
                    payload
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                Dtype::U8 => TensorData::U8(payload.to_vec()),
            };
            records.push(TensorRecord { name, shape, data });
        }
        if rd.pos != bytes.len() {
            return Err(ContainerError::TrailingBytes(bytes.len() - rd.pos));
        }
        Ok(Self { records })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(ContainerError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ContainerError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ContainerError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn write_container(path: impl AsRef<Path>, container: &Container) -> Result<(), ContainerError> {
    fs::write(path, container.to_bytes()?)?;
    Ok(())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container, ContainerError> {
    Container::from_bytes(&fs::read(path)?)
}
