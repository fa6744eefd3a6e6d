//! Binary checkpoint format.
//!
//! ```text
//! "SSAT" | u32 version (=1) | u32 tensor_count
//! per tensor: u32 name_len | name (UTF-8) | u32 ndim | u32 dims[ndim] | f32 data[prod(dims)]
//! ```
//!
//! All integers and floats are little-endian. The model configuration lives
//! in a JSON sidecar next to the binary (`<file>.json`), and loading checks
//! every tensor against the shapes that configuration implies.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SSAT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub(crate) fn encode(model: &Model) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + model.count_params() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.params() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!(
                    "truncated while reading {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn fail(&self, at: usize, detail: String) -> Error {
        Error::Format {
            offset: at as u64,
            detail,
        }
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<IndexMap<String, Tensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(r.fail(0, "bad magic, expected \"SSAT\"".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(4, format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut params = IndexMap::new();
    for _ in 0..count {
        let at = r.pos;
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|e| r.fail(at + 4, format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let ndim = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32("dimension")? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0 && ndim > 0)
            .ok_or_else(|| r.fail(at, format!("tensor `{name}` has invalid shape {dims:?}")))?;
        let raw = r.take(numel.saturating_mul(4), "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if params.contains_key(&name) {
            return Err(r.fail(at, format!("duplicate tensor `{name}`")));
        }
        params.insert(name, Tensor::new(&dims, data)?);
    }
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(params)
}

/// Writes the binary checkpoint and its JSON sidecar, each through a
/// temporary file and rename.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let json = serde_json::to_vec_pretty(model.config()).map_err(|source| Error::Json {
        path: sidecar_path(path),
        source,
    })?;
    write_atomic(&sidecar_path(path), &json)?;
    write_atomic(path, &encode(model))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let side = sidecar_path(path);
    let json = fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let config: ModelConfig = serde_json::from_slice(&json).map_err(|source| Error::Json { path: side, source })?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let params = decode(&bytes)?;
    Model::from_params(config, params)
}
