//! Flat key -> tensor checkpoint archive.
//!
//! Layout, all little-endian:
//!   magic "FPCK", version u32, entry count u32, then per entry sorted by
//!   key: key length u32 + UTF-8 key, ndim u32, dims u64 each, payload of
//!   f64 values. Writing is canonical, so load -> save reproduces the file
//!   byte for byte.

use crate::error::{Error, Result};
use crate::params::ParamTensor;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 4] = b"FPCK";
const VERSION: u32 = 1;

pub fn encode(entries: &BTreeMap<String, ParamTensor>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (key, tensor) in entries {
        out.extend_from_slice(&(key.len() as u32).to_le_bytes());
        out.extend_from_slice(key.as_bytes());
        out.extend_from_slice(&(tensor.shape.len() as u32).to_le_bytes());
        for &d in &tensor.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                path: self.path.clone(),
                offset: self.pos,
                reason: format!("need {} more bytes, archive truncated", n),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], path: &str) -> Result<BTreeMap<String, ParamTensor>> {
    let mut c = Cursor {
        bytes,
        pos: 0,
        path: path.to_string(),
    };
    if c.take(4)? != MAGIC {
        return Err(Error::Parse {
            path: path.to_string(),
            offset: 0,
            reason: "bad magic, not a checkpoint archive".into(),
        });
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Parse {
            path: path.to_string(),
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let count = c.u32()? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let key_len = c.u32()? as usize;
        let key = String::from_utf8(c.take(key_len)?.to_vec()).map_err(|_| Error::Parse {
            path: path.to_string(),
            offset: c.pos,
            reason: "key is not UTF-8".into(),
        })?;
        let ndim = c.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = c.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.insert(key, ParamTensor { data, shape });
    }
    Ok(out)
}

pub fn save(path: &Path, entries: &BTreeMap<String, ParamTensor>) -> Result<()> {
    fs::write(path, encode(entries)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<BTreeMap<String, ParamTensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}
