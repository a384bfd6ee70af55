//! Checkpoint and external-token containers.
//!
//! Checkpoint layout (little-endian): magic `GSCK`, u32 version, u32 tensor
//! count, then per tensor: u32 name length, UTF-8 name, u32 rank, u64 dims,
//! f64 data. Hyperparameters live in a JSON sidecar next to it
//! (`<checkpoint>.json`).
//!
//! Token files: magic `GSZT`, u32 version, u32 n, u32 d, then `n·d` f32.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ModelParams, NetConfig, Tensor};
use crate::error::{Error, Result};
use crate::regioning::RegionConfig;
use crate::scalar::Scalar;

const CKPT_MAGIC: &[u8; 4] = b"GSCK";
const TOKEN_MAGIC: &[u8; 4] = b"GSZT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub net: NetConfig,
    pub regions: RegionConfig,
    pub seed: u64,
    pub scalar: String,
    pub parameter_count: usize,
    #[serde(default)]
    pub fold: Option<usize>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_checkpoint<T: Scalar>(model: &ModelParams<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.tensors.len() as u32).to_le_bytes());
    for t in &model.tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &dim in &t.shape {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
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

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], net: NetConfig) -> Result<ModelParams<T>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != CKPT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| c.u64().map(|b| T::lit(f64::from_bits(b))))
            .collect::<Result<Vec<_>>>()?;
        tensors.push(Tensor { name, shape, data });
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    ModelParams::from_tensors(net, tensors)
}

pub fn save_checkpoint<T: Scalar>(model: &ModelParams<T>, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let mut json = serde_json::to_string_pretty(meta)?;
    json.push('\n');
    std::fs::write(&side, json).map_err(|e| Error::io(side, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(ModelParams<T>, CheckpointMeta)> {
    let path = path.as_ref();
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((decode_checkpoint(&bytes, meta.net)?, meta))
}

pub fn save_tokens(tokens: &[f32], n: usize, d: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if tokens.len() != n * d {
        return Err(Error::Contract(format!("{} token values for {n}×{d}", tokens.len())));
    }
    let mut out = Vec::with_capacity(16 + 4 * tokens.len());
    out.extend_from_slice(TOKEN_MAGIC);
    for v in [VERSION, n as u32, d as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in tokens {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads an external token file, returning `(n, d, tokens)`.
pub fn load_tokens(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f32>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != TOKEN_MAGIC {
        return Err(Error::Format("not a token file (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported token file version {version}")));
    }
    let (n, d) = (c.u32()? as usize, c.u32()? as usize);
    let data = (0..n * d)
        .map(|_| c.u32().map(f32::from_bits))
        .collect::<Result<Vec<_>>>()?;
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes in token file".into()));
    }
    Ok((n, d, data))
}
