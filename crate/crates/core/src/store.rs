//! Binary feature store and little-endian read helpers.
//!
//! Layout: `SDFEATS1`, descriptor (u32 length + UTF-8), dimension (u64),
//! row count (u64), then `rows * dimension` little-endian `f64`s, row-major.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::num::Real;

const FEATURE_MAGIC: &[u8; 8] = b"SDFEATS1";

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        ByteReader { bytes, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.what, "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.what, "invalid UTF-8"))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.what, "trailing bytes"));
        }
        Ok(())
    }
}

pub(crate) fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Labelled fixed-length feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector<F> {
    pub descriptor: String,
    pub values: Vec<F>,
}

impl<F: Real> FeatureVector<F> {
    pub fn new(descriptor: impl Into<String>, values: Vec<F>) -> Self {
        FeatureVector {
            descriptor: descriptor.into(),
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// A matrix of feature rows sharing one descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable<F> {
    descriptor: String,
    dim: usize,
    data: Vec<F>,
}

impl<F: Real> FeatureTable<F> {
    pub fn new(descriptor: impl Into<String>, dim: usize) -> Self {
        FeatureTable {
            descriptor: descriptor.into(),
            dim,
            data: Vec::new(),
        }
    }

    pub fn from_rows(descriptor: impl Into<String>, dim: usize, rows: &[Vec<F>]) -> Result<Self> {
        let mut t = Self::new(descriptor, dim);
        for r in rows {
            t.push(r)?;
        }
        Ok(t)
    }

    pub fn from_vectors(vectors: &[FeatureVector<F>]) -> Result<Self> {
        let first = vectors
            .first()
            .ok_or_else(|| Error::Empty("feature set".into()))?;
        let mut t = Self::new(first.descriptor.clone(), first.len());
        for v in vectors {
            if v.descriptor != t.descriptor {
                return Err(Error::DescriptorMismatch {
                    expected: t.descriptor.clone(),
                    got: v.descriptor.clone(),
                });
            }
            t.push(&v.values)?;
        }
        Ok(t)
    }

    pub fn push(&mut self, row: &[F]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::dims(self.dim, row.len()));
        }
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature value {v}")));
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn descriptor(&self) -> &str {
        &self.descriptor
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[F]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.descriptor.len() + 8 * self.data.len());
        out.extend_from_slice(FEATURE_MAGIC);
        put_string(&mut out, &self.descriptor);
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.rows() as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "feature store");
        if r.take(8)? != FEATURE_MAGIC {
            return Err(Error::format("feature store", "bad magic"));
        }
        let descriptor = r.string()?;
        let dim = r.u64()? as usize;
        let rows = r.u64()? as usize;
        let n = dim
            .checked_mul(rows)
            .ok_or_else(|| Error::format("feature store", "size overflow"))?;
        if bytes.len() - r.pos != n.saturating_mul(8) {
            return Err(Error::format(
                "feature store",
                format!("expected {} payload bytes, found {}", n * 8, bytes.len() - r.pos),
            ));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(F::lit(r.f64()?));
        }
        r.finish()?;
        Ok(FeatureTable {
            descriptor,
            dim,
            data,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::corpus::write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// CSV with a header row `f0,f1,...`.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let header: Vec<String> = (0..self.dim).map(|i| format!("f{i}")).collect();
        s.push_str(&header.join(","));
        s.push('\n');
        for row in self.iter() {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                let _ = write!(s, "{}", v.to_f64_lossy());
            }
            s.push('\n');
        }
        s
    }
}
