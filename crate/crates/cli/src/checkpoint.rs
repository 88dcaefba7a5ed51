//! Named-tensor checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"XFMR"  u32 version  u32 count
//! count x { u32 name_len, name (utf-8), u8 dtype (0 = f32, 1 = f64),
//!           u8 rank, u64 extents[rank], payload (row-major) }
//! u32 crc32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crossformer_core::model::ParamStore;
use crossformer_core::{DType, Real, Tensor};

pub const MAGIC: [u8; 4] = *b"XFMR";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("unknown dtype code {0}")]
    DType(u8),
    #[error("duplicate tensor name `{0}`")]
    Duplicate(String),
    #[error("tensor name is not valid utf-8")]
    Name,
    #[error("tensor `{0}` has an invalid shape")]
    Shape(String),
    #[error("{0} trailing bytes after the last entry")]
    Trailing(usize),
}

#[derive(Debug, Clone, PartialEq)]
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

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn cast<T: Real>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

fn wrap<T: Real>(t: Tensor<T>) -> AnyTensor {
    match T::DTYPE {
        DType::F32 => AnyTensor::F32(t.cast()),
        DType::F64 => AnyTensor::F64(t.cast()),
    }
}

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

/// Ordered named tensors with unique names.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    entries: Vec<(String, AnyTensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: impl Into<AnyTensor>) -> Result<(), CheckpointError> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(CheckpointError::Duplicate(name));
        }
        self.entries.push((name, t.into()));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &AnyTensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Storage precision shared by every entry, `None` if mixed or empty.
    pub fn dtype(&self) -> Option<DType> {
        let first = self.entries.first()?.1.dtype();
        self.entries.iter().all(|(_, t)| t.dtype() == first).then_some(first)
    }

    pub fn from_store<T: Real>(store: &ParamStore<T>) -> Self {
        Checkpoint {
            entries: store.iter().map(|(n, t)| (n.clone(), wrap(t.clone()))).collect(),
        }
    }

    /// Every entry converted to `T`.
    pub fn to_store<T: Real>(&self) -> ParamStore<T> {
        let mut store = ParamStore::new();
        for (n, t) in &self.entries {
            store.insert(n.clone(), t.cast());
        }
        store
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(dtype_code(t.dtype()));
            out.push(t.shape().len() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            match t {
                AnyTensor::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                AnyTensor::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 16 {
            return Err(if bytes.starts_with(&MAGIC) || bytes.len() < 4 {
                CheckpointError::Truncated
            } else {
                CheckpointError::BadMagic
            });
        }
        if bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Crc { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = r.u32()? as usize;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::Name)?
                .to_string();
            let code = r.take(1)?[0];
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| CheckpointError::Shape(name.clone()))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| CheckpointError::Shape(name.clone()))?;
            let t = match code {
                0 => {
                    let data = r.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
                    let v = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    AnyTensor::F32(Tensor::new(&shape, v).map_err(|_| CheckpointError::Shape(name.clone()))?)
                }
                1 => {
                    let data = r.take(numel.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
                    let v = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    AnyTensor::F64(Tensor::new(&shape, v).map_err(|_| CheckpointError::Shape(name.clone()))?)
                }
                c => return Err(CheckpointError::DType(c)),
            };
            ck.push(name, t)?;
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Trailing(body.len() - r.pos));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CheckpointError::Truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push("a", Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 - 2.5)).unwrap();
        ck.push("b.scalar", Tensor::<f64>::scalar(-0.0)).unwrap();
        ck.push("c", Tensor::<f64>::new(&[1, 0, 4], vec![]).unwrap()).unwrap();
        ck
    }

    #[test]
    fn header_bytes() {
        let b = sample().to_bytes();
        assert_eq!(&b[..4], b"XFMR");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 3);
        // first entry: name_len 1, "a", dtype 0, rank 2, extents 2 and 3
        assert_eq!(&b[12..18], &[1, 0, 0, 0, b'a', 0]);
        assert_eq!(b[18], 2);
        assert_eq!(u64::from_le_bytes(b[19..27].try_into().unwrap()), 2);
    }

    #[test]
    fn roundtrip() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.dtype(), None);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut ck = sample();
        assert!(matches!(
            ck.push("a", Tensor::<f32>::scalar(1.0)),
            Err(CheckpointError::Duplicate(_))
        ));
    }

    #[test]
    fn malformed_inputs() {
        let b = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&b[..10]), Err(CheckpointError::Truncated)));
        let mut bad = b.clone();
        bad[0] = b'Y';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        let mut bad = b.clone();
        let n = bad.len();
        bad[n - 1] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Crc { .. })));
    }

    #[test]
    fn unknown_dtype_with_valid_crc() {
        let mut b = sample().to_bytes();
        b.truncate(b.len() - 4);
        b[17] = 7;
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&b), Err(CheckpointError::DType(7))));
    }
}
