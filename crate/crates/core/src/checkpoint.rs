//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MMCK"  u16 version
//! u32 config length, config text (`key = value` lines)
//! u32 vocab size, then per token: u16 length, UTF-8 bytes
//! u16 digest length, vocab digest (hex)
//! u32 parameter count, then per parameter:
//!     u16 name length, name, u8 trainable, u8 rank, u32 dims[rank], f64 values
//! ```

use std::path::Path;

use thiserror::Error;

use crate::autograd::Tensor;
use crate::config::FlatConfig;
use crate::embeddings::VocabIndex;
use crate::models::{Model, ModelConfig, ModelError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint version {found} is not supported (expected {CHECKPOINT_VERSION})")]
    VersionMismatch { found: u16 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::CorruptFile(msg.into())
}

fn put_str16(out: &mut Vec<u8>, s: &str) {
    let len = u16::try_from(s.len()).expect("string longer than 65535 bytes");
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("count exceeds u32").to_le_bytes());
}

/// Serializes a model to checkpoint bytes.
pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = model.config().to_flat().render();
    put_u32(&mut out, config.len());
    out.extend_from_slice(config.as_bytes());
    let vocab = model.vocab();
    put_u32(&mut out, vocab.len());
    for t in vocab.tokens() {
        put_str16(&mut out, t);
    }
    put_str16(&mut out, &vocab.digest());
    put_u32(&mut out, model.params().len());
    for (_, p) in model.params().iter() {
        put_str16(&mut out, &p.name);
        out.push(p.trainable as u8);
        out.push(p.value.rank() as u8);
        for &d in p.value.shape() {
            put_u32(&mut out, d);
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn str_bytes(&mut self, n: usize, what: &str) -> Result<&'a str, CheckpointError> {
        std::str::from_utf8(self.take(n, what)?)
            .map_err(|_| corrupt(format!("{what} is not UTF-8")))
    }

    fn str16(&mut self, what: &str) -> Result<&'a str, CheckpointError> {
        let n = self.u16(what)? as usize;
        self.str_bytes(n, what)
    }
}

/// Rebuilds a model from checkpoint bytes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let n = r.u32("config length")?;
    let text = r.str_bytes(n, "config")?;
    let flat = FlatConfig::parse(text).map_err(|e| corrupt(e.to_string()))?;
    let config = ModelConfig::from_flat(&flat).map_err(|e| corrupt(e.to_string()))?;

    let n_tokens = r.u32("vocab size")?;
    let mut tokens = Vec::with_capacity(n_tokens.min(bytes.len()));
    for _ in 0..n_tokens {
        tokens.push(r.str16("vocab token")?);
    }
    let vocab = VocabIndex::from_tokens(tokens);
    if vocab.len() != n_tokens {
        return Err(corrupt("vocabulary has duplicate tokens"));
    }
    if r.str16("vocab digest")? != vocab.digest() {
        return Err(corrupt("vocabulary digest mismatch"));
    }

    let mut model = Model::new(config, vocab, None, None).map_err(|e| corrupt(e.to_string()))?;
    let n_params = r.u32("parameter count")?;
    if n_params != model.params().len() {
        return Err(corrupt(format!(
            "{n_params} parameters stored, architecture has {}",
            model.params().len()
        )));
    }
    let mut seen = vec![false; n_params];
    for _ in 0..n_params {
        let name = r.str16("parameter name")?;
        let id = model
            .params()
            .find(name)
            .ok_or_else(|| corrupt(format!("unknown parameter {name:?}")))?;
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(corrupt(format!("parameter {name:?} stored twice")));
        }
        let trainable = match r.u8("trainable flag")? {
            0 => false,
            1 => true,
            other => return Err(corrupt(format!("bad trainable flag {other}"))),
        };
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")?);
        }
        let expected = model.params().get(id).value.shape();
        if shape != expected {
            return Err(corrupt(format!(
                "parameter {name:?} has shape {shape:?}, expected {expected:?}"
            )));
        }
        let count: usize = shape.iter().product();
        let raw = r.take(count * 8, "parameter values")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?;
        let p = model.params_mut().get_mut(id);
        p.value = tensor.into();
        p.trainable = trainable;
    }
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(model)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model, CheckpointError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
