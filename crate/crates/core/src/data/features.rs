//! Binary feature store.
//!
//! Layout (little-endian): `PCF1`, u32 count, u32 rank, rank × u32 dims,
//! then per record a u16 id length, the UTF-8 id, and the row-major f32
//! payload.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"PCF1";

/// Image id → feature tensor; every entry shares one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    shape: Vec<usize>,
    entries: IndexMap<String, Vec<f32>>,
}

impl FeatureStore {
    pub fn new(shape: &[usize]) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Config(format!("invalid feature shape {shape:?}")));
        }
        Ok(FeatureStore {
            shape: shape.to_vec(),
            entries: IndexMap::new(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Channel dimension (last axis).
    pub fn dim(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Number of spatial positions (1 for vector features).
    pub fn positions(&self) -> usize {
        self.shape[..self.shape.len() - 1].iter().product()
    }

    pub fn is_grid(&self) -> bool {
        self.shape.len() > 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn insert(&mut self, id: impl Into<String>, values: Vec<f32>) -> Result<()> {
        let id = id.into();
        let n: usize = self.shape.iter().product();
        if values.len() != n {
            return Err(Error::shape("feature insert", &self.shape, &[values.len()]));
        }
        if id.len() > u16::MAX as usize {
            return Err(Error::Contract(format!("image id longer than {} bytes", u16::MAX)));
        }
        if self.entries.contains_key(&id) {
            return Err(Error::Contract(format!("duplicate image id {id:?}")));
        }
        self.entries.insert(id, values);
        Ok(())
    }

    pub fn raw(&self, id: &str) -> Option<&[f32]> {
        self.entries.get(id).map(Vec::as_slice)
    }

    /// Feature as a `[positions × dim]` tensor (a single row for vectors).
    pub fn matrix(&self, id: &str) -> Result<Tensor> {
        let raw = self.raw(id).ok_or_else(|| Error::Evaluation(format!("no features for image {id:?}")))?;
        Tensor::new(
            &[self.positions(), self.dim()],
            raw.iter().map(|&x| x as f64).collect(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for (id, v) in &self.entries {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != FEATURE_MAGIC {
            return Err(r.error_at(0, "bad magic, expected PCF1"));
        }
        let count = r.u32()? as usize;
        let rank_at = r.pos;
        let rank = r.u32()? as usize;
        if rank == 0 {
            return Err(r.error_at(rank_at as u64, "rank must be at least 1"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = r.pos;
            let d = r.u32()? as usize;
            if d == 0 {
                return Err(r.error_at(at as u64, "zero dimension"));
            }
            shape.push(d);
        }
        let mut store = FeatureStore::new(&shape)?;
        let n: usize = shape.iter().product();
        for _ in 0..count {
            let at = r.pos;
            let len = r.u16()? as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.error_at(at as u64 + 2, "image id is not UTF-8"))?
                .to_string();
            if store.contains(&id) {
                return Err(r.error_at(at as u64, &format!("duplicate image id {id:?}")));
            }
            let payload = r.take(n * 4)?;
            let values = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            store.entries.insert(id, values);
        }
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos as u64, &format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(store)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn error_at(&self, offset: u64, reason: &str) -> Error {
        Error::Format {
            path: self.path.to_string(),
            offset,
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error_at(
                self.pos as u64,
                &format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_store_is_sixteen_bytes() {
        let s = FeatureStore::new(&[2048]).unwrap();
        let b = s.to_bytes();
        assert_eq!(b.len(), 16);
        assert_eq!(FeatureStore::from_bytes(&b, "mem").unwrap(), s);
    }

    #[test]
    fn bad_magic_and_truncation_are_located() {
        let mut s = FeatureStore::new(&[2]).unwrap();
        s.insert("a", vec![1.0, 2.0]).unwrap();
        let mut b = s.to_bytes();
        let good = b.clone();
        b[0] = b'X';
        match FeatureStore::from_bytes(&b, "mem") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        match FeatureStore::from_bytes(&good[..good.len() - 3], "mem") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 19),
            other => panic!("{other:?}"),
        }
    }
}
