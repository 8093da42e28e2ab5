//! Flat binary container shared by checkpoints and dataset caches.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   b"ATPRUNE\0"
//! version    u32       FORMAT_VERSION
//! meta_len   u64       length of the JSON metadata block
//! meta       meta_len  UTF-8 JSON object
//! n_tensors  u32
//! per tensor:
//!   name_len u32, name (UTF-8)
//!   rank     u32, dims (u64 each)
//!   payload  product(dims) f64, row-major
//! n_scalars  u32
//! scalars    n_scalars f64
//! ```
//!
//! Floats are stored as raw IEEE-754 bits, so a save/load round trip is
//! bitwise exact.

use std::io::{Read, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ATPRUNE\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
    pub scalars: Vec<f64>,
}

impl Container {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&len_u32(self.tensors.len())?.to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&len_u32(name.len())?.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&len_u32(t.rank())?.to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            write_f64s(w, t.data())?;
        }
        w.write_all(&len_u32(self.scalars.len())?.to_le_bytes())?;
        write_f64s(w, &self.scalars)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let meta_len = read_u64(r)? as usize;
        let meta: Value = serde_json::from_slice(&read_bytes(r, meta_len)?)?;
        let n = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = read_u32(r)? as usize;
            let name = String::from_utf8(read_bytes(r, name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = read_u32(r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
            let data = read_f64s(r, numel)?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let n = read_u32(r)? as usize;
        let scalars = read_f64s(r, n)?;
        Ok(Self { meta, tensors, scalars })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut slice = bytes.as_slice();
        let c = Self::read_from(&mut slice)?;
        if !slice.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", slice.len())));
        }
        Ok(c)
    }

    /// Metadata field `key` as a string.
    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Format(format!("metadata field `{key}` missing")))
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("count {n} exceeds u32")))
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 8);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Format("unexpected end of file".into()));
    }
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let b = read_bytes(r, 4)?;
    Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let b = read_bytes(r, 8)?;
    Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let bytes = read_bytes(r, n.checked_mul(8).ok_or_else(|| Error::Format("overflow".into()))?)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}
