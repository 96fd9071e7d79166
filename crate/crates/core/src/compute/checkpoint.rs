//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "WGNQACKP"
//! version    u32      = 1
//! meta_len   u32      followed by meta_len bytes of UTF-8 key=value text
//! count      u32      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8)
//!   tag      u8       1 = f32, 2 = f64
//!   ndim     u32, then ndim x u64 dimensions
//!   payload  product(dims) x width bytes, row-major
//! ```

use super::{ParameterStore, Precision, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"WGNQACKP";
pub const FORMAT_VERSION: u32 = 1;

/// Tensor payload as stored on disk, before conversion to a working precision.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl StoredTensor {
    pub fn precision(&self) -> Precision {
        match self.payload {
            Payload::F32(_) => Precision::F32,
            Payload::F64(_) => Precision::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub tensors: Vec<StoredTensor>,
}

impl Checkpoint {
    pub fn from_store<F: Scalar>(store: &ParameterStore<F>, metadata: impl Into<String>) -> Self {
        let tensors = store
            .iter()
            .map(|(name, t)| StoredTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                payload: match F::PRECISION {
                    Precision::F32 => Payload::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
                    Precision::F64 => Payload::F64(t.data().iter().map(|v| v.as_f64()).collect()),
                },
            })
            .collect();
        Self {
            metadata: metadata.into(),
            tensors,
        }
    }

    /// Builds a parameter store; every tensor must already be in precision `F`.
    pub fn to_store<F: Scalar>(&self) -> Result<ParameterStore<F>> {
        let mut store = ParameterStore::new();
        for t in &self.tensors {
            if t.precision() != F::PRECISION {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` stored as {}, expected {}",
                    t.name,
                    t.precision().name(),
                    F::PRECISION.name()
                )));
            }
            let data: Vec<F> = match &t.payload {
                Payload::F32(v) => v.iter().map(|&x| F::from_f64(x as f64)).collect(),
                Payload::F64(v) => v.iter().map(|&x| F::from_f64(x)).collect(),
            };
            store.insert(t.name.clone(), Tensor::new(t.shape.clone(), data)?)?;
        }
        Ok(store)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_bytes(&mut out, self.metadata.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_bytes(&mut out, t.name.as_bytes());
            out.push(t.precision().tag());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &t.payload {
                Payload::F32(v) => v.iter().for_each(|x| x.write_le(&mut out)),
                Payload::F64(v) => v.iter().for_each(|x| x.write_le(&mut out)),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let metadata = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let tag = r.u8()?;
            let precision = Precision::from_tag(tag)
                .ok_or_else(|| Error::Checkpoint(format!("unknown precision tag {tag} for `{name}`")))?;
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(Error::Checkpoint(format!("`{name}` has {ndim} dimensions")));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut elems: usize = 1;
            for _ in 0..ndim {
                let d = usize::try_from(r.u64()?)
                    .map_err(|_| Error::Checkpoint(format!("dimension of `{name}` overflows")))?;
                elems = elems
                    .checked_mul(d)
                    .ok_or_else(|| Error::Checkpoint(format!("size of `{name}` overflows")))?;
                shape.push(d);
            }
            let width = precision.byte_width();
            let nbytes = elems
                .checked_mul(width)
                .ok_or_else(|| Error::Checkpoint(format!("size of `{name}` overflows")))?;
            let raw = r.take(nbytes)?;
            let payload = match precision {
                Precision::F32 => Payload::F32(raw.chunks_exact(4).map(f32::read_le).collect()),
                Precision::F64 => Payload::F64(raw.chunks_exact(8).map(f64::read_le).collect()),
            };
            tensors.push(StoredTensor { name, shape, payload });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let mut store = ParameterStore::<f32>::new();
        store.insert("w", Tensor::row(vec![1.0, 2.0])).unwrap();
        let bytes = Checkpoint::from_store(&store, "a=1\n").to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn precision_mismatch_is_reported() {
        let mut store = ParameterStore::<f32>::new();
        store.insert("w", Tensor::row(vec![1.0])).unwrap();
        let ck = Checkpoint::from_store(&store, "");
        assert!(ck.to_store::<f64>().is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in prop::collection::vec(prop::num::f64::ANY, 1..40),
            meta in "[a-z_=0-9\n]{0,40}",
        ) {
            let mut store = ParameterStore::<f64>::new();
            let n = values.len();
            store.insert("p.one", Tensor::new(vec![1, n], values.clone()).unwrap()).unwrap();
            store.insert("p.two", Tensor::new(vec![n, 1], values).unwrap()).unwrap();
            let ck = Checkpoint::from_store(&store, meta);
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            let restored = back.to_store::<f64>().unwrap();
            for ((na, a), (nb, b)) in store.iter().zip(restored.iter()) {
                prop_assert_eq!(na, nb);
                prop_assert_eq!(a.shape(), b.shape());
                let abits: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
                let bbits: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(abits, bbits);
            }
            prop_assert_eq!(back.metadata, ck.metadata);
        }
    }
}
