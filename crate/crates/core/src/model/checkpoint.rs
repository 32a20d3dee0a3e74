//! Binary checkpoint format.
//!
//! ```text
//! "GSCK" | version u16 | field count u16 | { tag len u8, tag, value u64 }*
//!        | weight count u32 | { name len u16, name, ndim u8, dims u32*, f32 LE* }*
//!        | FNV-1a-64 of all preceding bytes (u64)
//! ```
//! All integers are little-endian.

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;

use crate::fsutil::atomic_write;
use crate::tensor::Tensor;

use super::{ModelCheckpoint, ModelConfig, ModelError, Result, Weights};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GSCK";
const FORMAT_VERSION: u16 = 1;

const FIELDS: [&str; 9] = [
    "n_layers",
    "d_model",
    "n_heads",
    "vocab_size",
    "max_seq_len",
    "seed",
    "tokens_seen",
    "schedule_index",
    "config_hash",
];

fn fnv64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

pub fn encode_checkpoint(ckpt: &ModelCheckpoint) -> Vec<u8> {
    let c = &ckpt.config;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let values = [
        c.n_layers as u64,
        c.d_model as u64,
        c.n_heads as u64,
        c.vocab_size as u64,
        c.max_seq_len as u64,
        c.seed,
        ckpt.tokens_seen,
        ckpt.schedule_index as u64,
        ckpt.config_hash,
    ];
    out.extend_from_slice(&(FIELDS.len() as u16).to_le_bytes());
    for (tag, v) in FIELDS.iter().zip(values) {
        out.push(tag.len() as u8);
        out.extend_from_slice(tag.as_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    let named = ckpt.weights.named();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = fnv64(&out);
    out.extend_from_slice(&digest.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::Corrupt(format!(
                "unexpected end of data at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| ModelError::Corrupt("non-UTF-8 name".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelCheckpoint> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 2 + 8 {
        return Err(ModelError::Corrupt(format!(
            "file too short ({} bytes)",
            bytes.len()
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv64(body) != stored {
        return Err(ModelError::Corrupt(
            "digest mismatch (truncated or modified file)".into(),
        ));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(ModelError::Corrupt("bad magic bytes".into()));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(ModelError::Corrupt(format!(
            "unsupported format version {version}"
        )));
    }
    let n_fields = r.u16()? as usize;
    let mut fields = std::collections::HashMap::new();
    for _ in 0..n_fields {
        let len = r.u8()? as usize;
        let tag = r.str(len)?;
        fields.insert(tag, r.u64()?);
    }
    let field = |name: &str| {
        fields
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::Corrupt(format!("missing config field {name:?}")))
    };
    let config = ModelConfig {
        n_layers: field("n_layers")? as usize,
        d_model: field("d_model")? as usize,
        n_heads: field("n_heads")? as usize,
        vocab_size: field("vocab_size")? as usize,
        max_seq_len: field("max_seq_len")? as usize,
        seed: field("seed")?,
    };
    let stored_hash = field("config_hash")?;
    let computed = config.hash();
    if stored_hash != computed {
        return Err(ModelError::ConfigHashMismatch {
            stored: stored_hash,
            computed,
        });
    }
    config
        .validate()
        .map_err(|e| ModelError::Corrupt(format!("stored config is invalid: {e}")))?;

    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = r.str(len)?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != body.len() {
        return Err(ModelError::Corrupt("trailing bytes after weights".into()));
    }
    let weights = Weights::from_named(&config, tensors)?;
    Ok(ModelCheckpoint {
        config,
        weights,
        tokens_seen: field("tokens_seen")?,
        schedule_index: field("schedule_index")? as u32,
        config_hash: stored_hash,
    })
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    atomic_write(path, &encode_checkpoint(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}
