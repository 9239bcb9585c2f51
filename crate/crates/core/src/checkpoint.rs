//! Binary container for named parameter arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  "ADVFCKPT"          8 bytes
//! version u32
//! config  u32 length + UTF-8 text (architecture / run config)
//! count   u32
//! count x { name: u16 length + UTF-8, ndim: u8, dims: u64 x ndim, data: f64 x prod(dims) }
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ADVFCKPT";
pub const VERSION: u32 = 1;
const MAX_DIMS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Structured text describing how to rebuild the networks.
    pub config: String,
    pub arrays: ParamSet,
}

impl Checkpoint {
    pub fn new(config: impl Into<String>, arrays: ParamSet) -> Self {
        Checkpoint { config: config.into(), arrays }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.config.len() + self.arrays.numel() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in self.arrays.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let config_len = r.u32()? as usize;
        let config = std::str::from_utf8(r.take(config_len)?).map_err(|_| bad("config is not UTF-8"))?.to_string();
        let count = r.u32()? as usize;
        let mut arrays = ParamSet::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| bad("array name is not UTF-8"))?.to_string();
            if arrays.index_of(&name).is_some() {
                return Err(bad(format!("duplicate array {name}")));
            }
            let ndim = r.take(1)?[0] as usize;
            if ndim > MAX_DIMS {
                return Err(bad(format!("{ndim} dimensions")));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut numel: usize = 1;
            for _ in 0..ndim {
                let d = usize::try_from(r.u64()?).map_err(|_| bad("dimension overflow"))?;
                numel = numel.checked_mul(d).ok_or_else(|| bad("element count overflow"))?;
                shape.push(d);
            }
            let nbytes = numel.checked_mul(8).ok_or_else(|| bad("element count overflow"))?;
            let raw = r.take(nbytes)?;
            let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
            arrays.push(name, Tensor::new(shape, data));
        }
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config, arrays })
    }

    /// Write via a temporary file and rename, so readers never see a
    /// partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Arrays whose names start with `prefix/`, with the prefix removed.
    pub fn section(&self, prefix: &str) -> ParamSet {
        let lead = format!("{prefix}/");
        let mut out = ParamSet::new();
        for (name, t) in self.arrays.iter() {
            if let Some(rest) = name.strip_prefix(&lead) {
                out.push(rest, t.clone());
            }
        }
        out
    }

    /// Add every array of `set` under `prefix/`.
    pub fn add_section(&mut self, prefix: &str, set: &ParamSet) {
        for (name, t) in set.iter() {
            self.arrays.push(format!("{prefix}/{name}"), t.clone());
        }
    }
}

fn bad(detail: impl Into<String>) -> Error {
    Error::format("checkpoint", detail)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
