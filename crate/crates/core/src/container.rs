//! Binary tensor container shared by dataset samples, checkpoints and
//! pseudo-label files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes   "MGFT"
//! version      u32       CONTAINER_VERSION
//! count        u32       number of arrays
//! repeated `count` times:
//!   name_len   u16
//!   name       name_len bytes, UTF-8
//!   dtype      u8        0 = u8, 1 = i64, 2 = f32, 3 = f64
//!   ndim       u8
//!   dims       ndim x u64
//!   data       prod(dims) elements, little-endian
//! ```
//!
//! Trailing bytes after the last array are rejected.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MGFT";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    U8(Vec<u8>),
    I64(Vec<i64>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    fn dtype(&self) -> u8 {
        match self {
            ArrayData::U8(_) => 0,
            ArrayData::I64(_) => 1,
            ArrayData::F32(_) => 2,
            ArrayData::F64(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::U8(v) => v.len(),
            ArrayData::I64(v) => v.len(),
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    fn type_name(&self) -> &'static str {
        match self {
            ArrayData::U8(_) => "u8",
            ArrayData::I64(_) => "i64",
            ArrayData::F32(_) => "f32",
            ArrayData::F64(_) => "f64",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

/// Ordered collection of named arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    arrays: Vec<NamedArray>,
}

macro_rules! typed_access {
    ($insert:ident, $get:ident, $variant:ident, $ty:ty) => {
        pub fn $insert(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<$ty>) {
            self.insert(name.into(), shape.to_vec(), ArrayData::$variant(data));
        }

        pub fn $get(&self, name: &str) -> Result<(&[usize], &[$ty])> {
            let array = self.array(name)?;
            match &array.data {
                ArrayData::$variant(v) => Ok((&array.shape, v.as_slice())),
                other => Err(Error::Integrity(format!(
                    "array `{name}` has dtype {}, expected {}",
                    other.type_name(),
                    stringify!($ty)
                ))),
            }
        }
    };
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: String, shape: Vec<usize>, data: ArrayData) {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match data length for `{name}`"
        );
        self.arrays.retain(|a| a.name != name);
        self.arrays.push(NamedArray { name, shape, data });
    }

    typed_access!(insert_u8, get_u8, U8, u8);
    typed_access!(insert_i64, get_i64, I64, i64);
    typed_access!(insert_f32, get_f32, F32, f32);
    typed_access!(insert_f64, get_f64, F64, f64);

    pub fn insert_json<T: serde::Serialize>(&mut self, name: impl Into<String>, value: &T) -> Result<()> {
        let bytes = serde_json::to_vec(value)?;
        let len = bytes.len();
        self.insert_u8(name, &[len], bytes);
        Ok(())
    }

    pub fn get_json<T: serde::de::DeserializeOwned>(&self, name: &str) -> Result<T> {
        let (_, bytes) = self.get_u8(name)?;
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn array(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::MissingArray(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.iter().any(|a| a.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|a| a.name.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for array in &self.arrays {
            let name = array.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(array.data.dtype());
            out.push(array.shape.len() as u8);
            for &d in &array.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &array.data {
                ArrayData::U8(v) => out.extend_from_slice(v),
                ArrayData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Integrity("bad container magic".into()));
        }
        let version = r.u32()?;
        if version != CONTAINER_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CONTAINER_VERSION,
            });
        }
        let count = r.u32()? as usize;
        let mut container = TensorContainer::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Integrity("array name is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let data = match dtype {
                0 => ArrayData::U8(r.take(n)?.to_vec()),
                1 => ArrayData::I64(
                    r.take(n * 8)?
                        .chunks_exact(8)
                        .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                2 => ArrayData::F32(
                    r.take(n * 4)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                3 => ArrayData::F64(
                    r.take(n * 8)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                other => return Err(Error::Integrity(format!("unknown dtype tag {other}"))),
            };
            container.arrays.push(NamedArray { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Integrity(format!(
                "{} trailing bytes after last array",
                bytes.len() - r.pos
            )));
        }
        Ok(container)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| Error::Integrity("truncated tensor container".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
