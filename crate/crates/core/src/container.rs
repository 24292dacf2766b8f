// SPDX-License-Identifier: MIT OR Apache-2.0

//! `LFTC` tensor container: the single interchange format for activations,
//! SAE parameters, steering vectors, and planted worlds.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "LFTC"                     4 ASCII bytes
//! version: u32               currently 1
//! tensor count: u32
//! per tensor:
//!   name length: u16, name: UTF-8 bytes
//!   rank: u8, dims: rank × u32
//!   values: prod(dims) × f32, row-major
//! metadata length: u32
//! metadata: UTF-8 `key=value` lines joined by LF
//! ```
//!
//! Payloads are single precision on disk and widened to `f64` on load.
//! Files containing NaN or infinite values are rejected.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 4] = b"LFTC";
pub const VERSION: u32 = 1;

/// A named dense tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        Error::check_dim(n, values.len())?;
        Ok(Self { dims, values })
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            dims: vec![m.rows(), m.cols()],
            values: m.as_slice().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_vector(v: &[f64]) -> Self {
        Self {
            dims: vec![v.len()],
            values: v.iter().map(|&x| x as f32).collect(),
        }
    }

    /// Index lists are stored as f32; exact for ids below 2^24.
    pub fn from_indices(idx: &[usize]) -> Self {
        Self {
            dims: vec![idx.len()],
            values: idx.iter().map(|&i| i as f32).collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.dims.as_slice() {
            [r, c] => Matrix::new(*r, *c, self.to_f64()),
            _ => Err(Error::Malformed(format!(
                "expected rank-2 tensor, found rank {}",
                self.dims.len()
            ))),
        }
    }

    pub fn to_vector(&self) -> Result<Vec<f64>> {
        if self.dims.len() != 1 {
            return Err(Error::Malformed(format!(
                "expected rank-1 tensor, found rank {}",
                self.dims.len()
            )));
        }
        Ok(self.to_f64())
    }

    pub fn to_indices(&self) -> Result<Vec<usize>> {
        self.to_vector()?
            .into_iter()
            .map(|v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Malformed(format!("{v} is not an index")))
                }
            })
            .collect()
    }

    fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

/// Ordered collection of named tensors plus textual metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    tensors: Vec<(String, Tensor)>,
    metadata: Vec<(String, String)>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a tensor; names must be nonempty and unique.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::invalid("tensor name must be nonempty"));
        }
        if name.len() > u16::MAX as usize {
            return Err(Error::invalid("tensor name too long"));
        }
        if self.get(&name).is_some() {
            return Err(Error::DuplicateName(name));
        }
        self.tensors.push((name, tensor));
        Ok(())
    }

    pub fn with(mut self, name: impl Into<String>, tensor: Tensor) -> Result<Self> {
        self.push(name, tensor)?;
        Ok(self)
    }

    /// Set a metadata pair, replacing any previous value for the key.
    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.metadata.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.metadata.push((key, value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Malformed(format!("missing tensor {name:?}")))
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::Malformed(format!("missing metadata key {key:?}")))
    }

    /// Parse a metadata value.
    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require_meta(key)?;
        raw.parse()
            .map_err(|_| Error::Malformed(format!("bad value for {key:?}: {raw:?}")))
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn metadata(&self) -> impl Iterator<Item = (&str, &str)> {
        self.metadata.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            if t.dims.len() > u8::MAX as usize {
                return Err(Error::invalid(format!("tensor {name:?} has too many dims")));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                let d = u32::try_from(d)
                    .map_err(|_| Error::invalid(format!("dimension {d} exceeds u32")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut meta = String::new();
        for (i, (k, v)) in self.metadata.iter().enumerate() {
            if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::invalid(format!("bad metadata pair {k:?}={v:?}")));
            }
            if i > 0 {
                meta.push('\n');
            }
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4).map_err(|_| Error::BadMagic)? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch(version));
        }
        let count = r.u32()? as usize;
        let mut c = TensorContainer::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or(Error::Truncated)?;
            let raw = r.take(n.checked_mul(4).ok_or(Error::Truncated)?)?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("container payload"));
            }
            if c.get(&name).is_some() {
                return Err(Error::DuplicateName(name));
            }
            if name.is_empty() {
                return Err(Error::Malformed("empty tensor name".into()));
            }
            c.tensors.push((name, Tensor { dims, values }));
        }
        let meta_len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Malformed("metadata is not UTF-8".into()))?;
        for line in meta.split('\n').filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Malformed(format!("metadata line without '=': {line:?}")))?;
            c.metadata.push((k.to_string(), v.to_string()));
        }
        if r.pos != bytes.len() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(c)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn write_container(path: impl AsRef<Path>, c: &TensorContainer) -> Result<()> {
    std::fs::write(path, c.to_bytes()?)?;
    Ok(())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<TensorContainer> {
    TensorContainer::from_bytes(&std::fs::read(path)?)
}
