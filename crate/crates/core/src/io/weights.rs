//! `DPTW` weight files.
//!
//! Layout, little-endian: magic `DPTW`, version `u32`, leaf count `u32`, then
//! per leaf: name length `u32`, UTF-8 name, rank `u32`, extents `u64` each,
//! and the `f64` payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"DPTW";
pub const VERSION: u32 = 1;

pub fn encode_weights(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &e in p.value.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in p.value.data() {
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
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated weight file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Named tensors in file order.
pub fn decode_weights(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, not a DPTW file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported DPTW version {version}")));
    }
    let count = r.u32()? as usize;
    let mut leaves = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("leaf name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Format(format!("leaf `{name}` is too large")))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("leaf too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
        leaves.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last leaf",
            bytes.len() - r.pos
        )));
    }
    Ok(leaves)
}

pub fn save_weights(params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, encode_weights(&params.store)).map_err(|e| Error::io(path, e))
}

/// Overwrites every leaf of `params` from `bytes`; names and shapes must match exactly.
pub fn apply_weights(params: &mut ModelParams, bytes: &[u8]) -> Result<()> {
    let leaves = decode_weights(bytes)?;
    if leaves.len() != params.store.len() {
        return Err(Error::Format(format!(
            "file has {} leaves, model has {}",
            leaves.len(),
            params.store.len()
        )));
    }
    for (p, (name, value)) in params.store.params_mut().iter_mut().zip(leaves) {
        if p.name != name || p.value.shape() != value.shape() {
            return Err(Error::Format(format!(
                "leaf `{name}` {:?} does not match model leaf `{}` {:?}",
                value.shape(),
                p.name,
                p.value.shape()
            )));
        }
        p.value = value;
    }
    Ok(())
}

/// Builds a model for `config` and fills it from the file at `path`.
pub fn load_weights(config: &crate::model::ModelConfig, path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut params = ModelParams::init(config)?;
    apply_weights(&mut params, &bytes)?;
    params.freeze();
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn params() -> ModelParams {
        ModelParams::init(&ModelConfig {
            vocab_size: 10,
            init_seed: 3,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.dptw");
        let p = params();
        save_weights(&p, &path).unwrap();
        let q = load_weights(&p.config, &path).unwrap();
        assert_eq!(p.fingerprint(), q.fingerprint());
        let again = dir.path().join("w2.dptw");
        save_weights(&q, &again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let bytes = encode_weights(&params().store);
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_weights(&bad_magic), Err(Error::Format(_))));
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(decode_weights(&bad_version), Err(Error::Format(_))));
        assert!(matches!(decode_weights(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_weights(&extra), Err(Error::Format(_))));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let bytes = encode_weights(&params().store);
        let mut other = ModelParams::init(&ModelConfig {
            vocab_size: 11,
            ..ModelConfig::default()
        })
        .unwrap();
        assert!(matches!(apply_weights(&mut other, &bytes), Err(Error::Format(_))));
    }
}
