//! Binary checkpoint: magic, format version, model config as JSON, named
//! little-endian `f64` tensors, then a SHA-256 of everything before it.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{GruGatModel, ModelConfig};
use crate::autodiff::{ParameterSet, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GCGRUGAT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

pub fn save_checkpoint(model: &GruGatModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(model.config())?;
    buf.extend_from_slice(&(config.len() as u64).to_le_bytes());
    buf.extend_from_slice(&config);
    buf.extend_from_slice(&(model.params().len() as u64).to_le_bytes());
    for (name, t) in model.params().named_values() {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated checkpoint at byte {}", self.pos))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).ok().filter(|&n| n <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("implausible length {v} at byte {}", self.pos - 8))
        })
    }
}

fn decode(bytes: &[u8]) -> Result<(ModelConfig, ParameterSet)> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + DIGEST_LEN {
        return Err(Error::Checkpoint(format!("truncated checkpoint ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a model checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {version}, this build reads version {CHECKPOINT_VERSION}"
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch (truncated or corrupted checkpoint)".into()));
    }
    let mut r = Reader { buf: body, pos: 12 };
    let config_len = r.len()?;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)?;
    let count = r.len()?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let name_len = r.len()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let (rows, cols) = (r.len()?, r.len()?);
        let n = rows.checked_mul(cols).ok_or_else(|| Error::Checkpoint(format!("bad shape for {name}")))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint(format!("bad shape for {name}")))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        params.register(name, Tensor::new(rows, cols, data));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok((config, params))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            path: path.to_path_buf(),
            hint: "checkpoint not found; run the train stage first".into(),
        },
        _ => Error::io(path, e),
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<GruGatModel> {
    let (config, params) = decode(&read(path.as_ref())?)?;
    GruGatModel::from_parts(config, &params)
}

/// Loads a checkpoint and rejects it unless its architecture matches
/// `expected`. Training-only fields are taken from `expected`.
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<GruGatModel> {
    let (config, params) = decode(&read(path.as_ref())?)?;
    if !config.same_architecture(expected) {
        return Err(Error::Checkpoint(format!(
            "config mismatch: checkpoint has hidden_dim={} heads={} classes={}, expected hidden_dim={} heads={} classes={}",
            config.hidden_dim, config.heads, config.classes, expected.hidden_dim, expected.heads, expected.classes
        )));
    }
    GruGatModel::from_parts(expected.clone(), &params)
}
