//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic       5 bytes   "RRDE1"
//! version     u32       FORMAT_VERSION
//! meta_count  u32
//!   key_len u32, key utf-8, value_len u32, value utf-8      (meta_count times)
//! entry_count u32
//!   id_len u32, id utf-8, rank u32, dims u64 x rank, data f64 x prod(dims)
//! ```
//!
//! Metadata is a sorted string map; entries keep insertion order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"RRDE1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn push(&mut self, id: impl Into<String>, tensor: Tensor) {
        self.entries.push((id.into(), tensor));
    }

    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(k, _)| k == id).map(|(_, t)| t)
    }

    pub fn require(&self, id: &str) -> Result<&Tensor> {
        self.get(id).ok_or_else(|| Error::Format(format!("checkpoint has no entry `{id}`")))
    }

    pub fn meta_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta.get(key).ok_or_else(|| Error::Format(format!("checkpoint has no metadata `{key}`")))?;
        raw.parse().map_err(|_| Error::Format(format!("metadata `{key}` has invalid value `{raw}`")))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for (k, v) in &self.meta {
            write_str(w, k)?;
            write_str(w, v)?;
        }
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (id, t) in &self.entries {
            write_str(w, id)?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(format!("truncated checkpoint: {e}"));
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = read_u32(r).map_err(fmt)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut ckpt = Checkpoint::new();
        for _ in 0..read_u32(r).map_err(fmt)? {
            let k = read_str(r)?;
            let v = read_str(r)?;
            ckpt.meta.insert(k, v);
        }
        for _ in 0..read_u32(r).map_err(fmt)? {
            let id = read_str(r)?;
            let rank = read_u32(r).map_err(fmt)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(fmt)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("entry `{id}` is too large")))?;
            let mut bytes = vec![0u8; numel * 8];
            r.read_exact(&mut bytes).map_err(fmt)?;
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            ckpt.entries.push((id, Tensor::new(shape, data)?));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r).map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    let mut b = vec![0u8; len as usize];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    String::from_utf8(b).map_err(|_| Error::Format("non-utf8 string in checkpoint".into()))
}
