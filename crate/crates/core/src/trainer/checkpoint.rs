//! Checkpoint files: an 8-byte magic, a little-endian u32 format version, a
//! u64 header length, a JSON header, then every tensor as little-endian f64
//! in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dualenc::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"CHLBCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    config_digest: String,
    params_digest: String,
    step: u64,
    config: EncoderConfig,
    tensors: Vec<TensorEntry>,
}

pub fn checkpoint_bytes(params: &EncoderParams, step: u64) -> Vec<u8> {
    let header = Header {
        version: FORMAT_VERSION,
        config_digest: params.config.digest(),
        params_digest: params.digest(),
        step,
        config: params.config.clone(),
        tensors: params
            .store
            .iter()
            .map(|(_, name, t)| TensorEntry { name: name.into(), shape: t.shape().to_vec() })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + 8 * params.store.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in params.store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(params: &EncoderParams, step: u64, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, checkpoint_bytes(params, step)).map_err(|e| Error::io(path, e))
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format(format!("checkpoint truncated in {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

/// Parse checkpoint bytes. With `expected`, the embedded config digest must
/// match it.
pub fn parse_checkpoint(mut bytes: &[u8], expected: Option<&EncoderConfig>) -> Result<(EncoderParams, u64)> {
    if take(&mut bytes, 8, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("checkpoint version {version}, expected {FORMAT_VERSION}")));
    }
    let len = u64::from_le_bytes(take(&mut bytes, 8, "header length")?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| Error::Format("header length overflows".into()))?;
    let header: Header = serde_json::from_slice(take(&mut bytes, len, "header")?)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if header.config.digest() != header.config_digest {
        return Err(Error::DigestMismatch { expected: header.config_digest, found: header.config.digest() });
    }
    if let Some(cfg) = expected {
        if cfg.digest() != header.config_digest {
            return Err(Error::DigestMismatch { expected: cfg.digest(), found: header.config_digest });
        }
    }
    let mut store = ParamStore::new();
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let raw = take(&mut bytes, n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?, &t.name)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        store.add(t.name.clone(), Tensor::new(t.shape.clone(), data)?);
    }
    if !bytes.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after tensors", bytes.len())));
    }
    let params = EncoderParams::from_store(&header.config, store)?;
    if params.digest() != header.params_digest {
        return Err(Error::DigestMismatch { expected: header.params_digest, found: params.digest() });
    }
    Ok((params, header.step))
}

/// Load a checkpoint written for `config`.
pub fn load_checkpoint(path: &Path, config: &EncoderConfig) -> Result<EncoderParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, Some(config)).map(|p| p.0)
}

/// Load a checkpoint with the encoder config it carries.
pub fn read_checkpoint(path: &Path) -> Result<(EncoderParams, u64)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, None)
}
