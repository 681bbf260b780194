//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "NDCKPT\0\x01"
//! version    u32
//! meta_len   u64
//! meta       meta_len bytes of UTF-8 JSON
//! count      u64
//! count × tensor:
//!     name_len u32, name bytes (UTF-8)
//!     dtype    u8    (0 = f32)
//!     ndim     u32, dims u64 × ndim
//!     data     4 × prod(dims) bytes, f32 little-endian
//! ```
//!
//! Tensors are written in insertion order, so save → load → save reproduces
//! the file byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NDCKPT\0\x01";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Serialized RNG position for exact resume.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    /// Architecture listing of the stored model.
    pub config: String,
    /// Training listing, when written by the trainer.
    pub train_config: Option<String>,
    pub step: u64,
    pub phase: usize,
    pub schedules: Vec<String>,
    pub rng: Option<RngState>,
    /// Per-parameter Adam step counts, in parameter order.
    pub adam_steps: Vec<u64>,
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl CheckpointMeta {
    pub fn new(config: String) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config,
            train_config: None,
            step: 0,
            phase: 0,
            schedules: Vec::new(),
            rng: None,
            adam_steps: Vec::new(),
            extra: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    /// Append every tensor of `store` under `prefix/`.
    pub fn add_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (name, t) in store.iter() {
            self.tensors.push((format!("{prefix}/{name}"), t.clone()));
        }
    }

    pub fn add(&mut self, name: &str, t: Tensor<f32>) {
        self.tensors.push((name.to_string(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// All tensors under `prefix/`, in stored order, as a parameter store.
    pub fn store(&self, prefix: &str) -> Result<ParamStore<f32>> {
        let lead = format!("{prefix}/");
        let mut s = ParamStore::new();
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(&lead) {
                s.insert(rest, t.clone())?;
            }
        }
        Ok(s)
    }

    /// Tensors under `prefix/` in stored order, without names.
    pub fn tensors_with_prefix(&self, prefix: &str) -> Vec<Tensor<f32>> {
        let lead = format!("{prefix}/");
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(&lead))
            .map(|(_, t)| t.clone())
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u64()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Format(format!("unsupported dtype tag {dtype} for `{name}`")));
            }
            let ndim = r.u32()? as usize;
            let dims = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(&dims, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last tensor".into()));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut meta = CheckpointMeta::new("config:\n    a=1\n".into());
        meta.step = 42;
        meta.schedules = vec!["cosine".into()];
        meta.extra.insert("note".into(), serde_json::json!(0.1));
        let mut c = Checkpoint::new(meta);
        c.add("model/w", Tensor::new(&[2, 2], vec![1.0, -0.5, 3.25, f32::MIN_POSITIVE]).unwrap());
        c.add("model/b", Tensor::zeros(&[3]));
        c
    }

    #[test]
    fn byte_identical_round_trip() {
        let c = sample();
        let a = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), a);
    }

    #[test]
    fn rejects_corruption() {
        let a = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&a[..a.len() - 1]).is_err());
        let mut b = a.clone();
        b[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Format(_))));
        let mut c = a.clone();
        c.push(0);
        assert!(Checkpoint::from_bytes(&c).is_err());
    }

    #[test]
    fn prefix_store() {
        let c = sample();
        let s = c.store("model").unwrap();
        assert_eq!(s.names(), &["w".to_string(), "b".to_string()]);
        assert!(c.store("ema").unwrap().is_empty());
    }
}
