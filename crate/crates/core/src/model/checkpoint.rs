//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"SIMUCKPT"
//! version u32
//! config  6 x u64   n_layers d_model n_heads d_ff vocab_size max_seq_len
//! meta    u32 len + UTF-8 JSON object of string pairs
//! count   u32
//! blob*   u32 name len, name, u32 ndim, ndim x u64 dims, f64 data
//! ```
//!
//! Model parameters come first in canonical order; any further blobs
//! (optimizer moments) follow under their own names.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::config::TransformerConfig;
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::hashing::sha256_hex;
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SIMUCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Named non-parameter tensors, e.g. optimizer moments.
    pub extras: Vec<(String, Tensor)>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Checkpoint {
            params,
            extras: Vec::new(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn extra(&self, name: &str) -> Option<&Tensor> {
        self.extras.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        write_config(&mut out, &self.params.config);
        let meta = serde_json::to_vec(&self.metadata)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        let infos = self.params.infos();
        let count = infos.len() + self.extras.len();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (info, t) in infos.iter().zip(self.params.tensors()) {
            write_blob(&mut out, &info.name, t);
        }
        for (name, t) in &self.extras {
            write_blob(&mut out, name, t);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0, origin };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format(origin, "bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(origin, format!("unsupported version {version}")));
        }
        let config = read_config(&mut r)?;
        config.validate().map_err(|e| Error::format(origin, e.to_string()))?;
        let meta_len = r.u32()? as usize;
        let metadata: BTreeMap<String, String> =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::format(origin, e.to_string()))?;
        let count = r.u32()? as usize;
        let template = ModelParams::init(config, 0, 0.0)?;
        let infos = template.infos();
        if count < infos.len() {
            return Err(Error::format(origin, format!("{count} blobs, model needs {}", infos.len())));
        }
        let mut tensors = Vec::with_capacity(infos.len());
        for info in &infos {
            let (name, t) = read_blob(&mut r)?;
            if name != info.name {
                return Err(Error::format(origin, format!("expected blob {}, found {name}", info.name)));
            }
            tensors.push(t);
        }
        let params = ModelParams::from_tensors(config, tensors).map_err(|e| Error::format(origin, e.to_string()))?;
        let mut extras = Vec::new();
        for _ in infos.len()..count {
            extras.push(read_blob(&mut r)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(origin, "trailing bytes"));
        }
        Ok(Checkpoint { params, extras, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

/// SHA-256 over the configuration and parameter blobs only.
pub fn params_hash(params: &ModelParams) -> String {
    let mut out = Vec::new();
    write_config(&mut out, &params.config);
    for (info, t) in params.infos().iter().zip(params.tensors()) {
        write_blob(&mut out, &info.name, t);
    }
    sha256_hex(&out)
}

fn write_config(out: &mut Vec<u8>, c: &TransformerConfig) {
    for v in [c.n_layers, c.d_model, c.n_heads, c.d_ff, c.vocab_size, c.max_seq_len] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
}

fn read_config(r: &mut Reader<'_>) -> Result<TransformerConfig> {
    let mut v = [0usize; 6];
    for slot in v.iter_mut() {
        *slot = r.u64()? as usize;
    }
    Ok(TransformerConfig {
        n_layers: v[0],
        d_model: v[1],
        n_heads: v[2],
        d_ff: v[3],
        vocab_size: v[4],
        max_seq_len: v[5],
    })
}

fn write_blob(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_blob(r: &mut Reader<'_>) -> Result<(String, Tensor)> {
    let name_len = r.u32()? as usize;
    let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| Error::format(r.origin, e.to_string()))?;
    let ndim = r.u32()? as usize;
    if ndim == 0 || ndim > 8 {
        return Err(Error::format(r.origin, format!("blob {name}: bad rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u64()? as usize);
    }
    let n: usize = shape.iter().product();
    if n.checked_mul(8).map_or(true, |b| b > r.remaining()) {
        return Err(Error::format(r.origin, format!("blob {name}: truncated")));
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.f64()?);
    }
    let t = Tensor::new(shape, data).map_err(|e| Error::format(r.origin, e.to_string()))?;
    Ok((name, t))
}

pub(crate) struct Reader<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
    pub origin: &'a Path,
}

impl<'a> Reader<'a> {
    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::format(self.origin, "unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
