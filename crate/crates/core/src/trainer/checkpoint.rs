//! Little-endian binary container of named arrays.
//!
//! Layout: magic `PAA1`, format version `u32`, array count `u32`, then per
//! array: name length `u32`, UTF-8 name, dtype tag `u8` (0 = f32, 1 = f64,
//! 2 = u64), rank `u32`, dims as `u64`s and the raw elements.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PAA1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("unknown dtype tag {0}")]
    BadDtype(u8),
    #[error("array name is not UTF-8")]
    BadName,
    #[error("{0} trailing bytes after the last array")]
    Trailing(usize),
    #[error("checkpoint lacks array `{0}`")]
    Missing(String),
    #[error("array `{name}` has the wrong type or shape")]
    Mismatch { name: String },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl ArrayData {
    fn tag(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::F64(_) => 1,
            ArrayData::U64(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

/// Ordered named arrays. Order is preserved through a round trip.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    arrays: Vec<(String, Array)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: impl Into<String>, array: Array) {
        let name = name.into();
        match self.arrays.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = array,
            None => self.arrays.push((name, array)),
        }
    }

    pub fn put_f32(&mut self, name: impl Into<String>, t: &Tensor<f32>) {
        self.insert(
            name,
            Array {
                dims: t.shape().to_vec(),
                data: ArrayData::F32(t.data().to_vec()),
            },
        );
    }

    pub fn put_u64(&mut self, name: impl Into<String>, values: Vec<u64>) {
        self.insert(
            name,
            Array {
                dims: vec![values.len()],
                data: ArrayData::U64(values),
            },
        );
    }

    /// Stores raw bytes, one per `u64` element.
    pub fn put_bytes(&mut self, name: impl Into<String>, bytes: &[u8]) {
        self.put_u64(name, bytes.iter().map(|&b| b as u64).collect());
    }

    pub fn f32_tensor(&self, name: &str) -> Result<Tensor<f32>> {
        match self.get(name) {
            Some(Array {
                dims,
                data: ArrayData::F32(v),
            }) => Tensor::new(dims, v.clone()).map_err(|_| CheckpointError::Mismatch { name: name.into() }),
            Some(_) => Err(CheckpointError::Mismatch { name: name.into() }),
            None => Err(CheckpointError::Missing(name.into())),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.get(name) {
            Some(Array {
                data: ArrayData::U64(v),
                ..
            }) => Ok(v),
            Some(_) => Err(CheckpointError::Mismatch { name: name.into() }),
            None => Err(CheckpointError::Missing(name.into())),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<Vec<u8>> {
        self.u64s(name)?
            .iter()
            .map(|&v| u8::try_from(v).map_err(|_| CheckpointError::Mismatch { name: name.into() }))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, array) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(array.data.tag());
            out.extend_from_slice(&(array.dims.len() as u32).to_le_bytes());
            for &d in &array.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &array.data {
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("four bytes");
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = r.u32()?;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::BadName)?
                .to_string();
            let tag = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or(CheckpointError::Truncated(r.pos))?;
            let data = match tag {
                0 => ArrayData::F32(
                    r.chunks(n, 4)?
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => ArrayData::F64(
                    r.chunks(n, 8)?
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                2 => ArrayData::U64(
                    r.chunks(n, 8)?
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                t => return Err(CheckpointError::BadDtype(t)),
            };
            debug_assert_eq!(data.len(), n);
            arrays.push((name, Array { dims, data }));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Trailing(bytes.len() - r.pos));
        }
        Ok(Checkpoint { arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
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
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn chunks(&mut self, n: usize, width: usize) -> Result<std::slice::ChunksExact<'a, u8>> {
        let total = n.checked_mul(width).ok_or(CheckpointError::Truncated(self.pos))?;
        Ok(self.take(total)?.chunks_exact(width))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.put_f32(
            "w",
            &Tensor::new(&[2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap(),
        );
        c.put_u64("progress", vec![3, 17]);
        c.put_bytes("config", b"seed = 1\n");
        c.insert(
            "d",
            Array {
                dims: vec![1],
                data: ArrayData::F64(vec![0.1]),
            },
        );
        c
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.bytes("config").unwrap(), b"seed = 1\n");
        assert_eq!(&bytes[..4], b"PAA1");
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let mut bytes = sample().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::Truncated(_))
        ));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&longer),
            Err(CheckpointError::Trailing(1))
        ));
        bytes[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::Version(9))
        ));
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::BadMagic(_))
        ));
        assert!(matches!(sample().f32_tensor("nope"), Err(CheckpointError::Missing(_))));
        assert!(matches!(
            sample().f32_tensor("progress"),
            Err(CheckpointError::Mismatch { .. })
        ));
    }
}
