//! Versioned binary checkpoints.
//!
//! Layout: `DATN`, version byte, length-prefixed UTF-8 config blob
//! (`key=value` lines), tensor count, then per tensor a length-prefixed
//! name, rank, dims and raw little-endian `f64` values. Integers are `u32`
//! little-endian.

use std::fs;
use std::path::Path;

use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::graph::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::parse_kv;
use super::{Model, ModelConfig, Stage};

pub const MAGIC: &[u8; 4] = b"DATN";
pub const VERSION: u8 = 1;

/// A model together with the vocabularies it was trained on.
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar> {
    pub model: Model<T>,
    pub src_vocab: Option<Vocab>,
    pub tgt_vocab: Option<Vocab>,
}

fn push_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid("write_checkpoint", "value exceeds u32"))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn push_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    push_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn config_blob<T: Scalar>(ckpt: &Checkpoint<T>) -> String {
    let mut blob = format!("stage={}\n", ckpt.model.stage());
    for (k, v) in ckpt.model.config().to_pairs() {
        blob.push_str(&format!("{k}={v}\n"));
    }
    for (key, vocab) in [("src_tokens", &ckpt.src_vocab), ("tgt_tokens", &ckpt.tgt_vocab)] {
        if let Some(v) = vocab {
            blob.push_str(&format!("{key}={}\n", v.user_tokens().join(" ")));
        }
    }
    blob
}

pub fn write_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    push_str(&mut out, &config_blob(ckpt))?;
    let params = ckpt.model.params();
    push_u32(&mut out, params.len())?;
    for (_, name, t) in params.iter() {
        push_str(&mut out, name)?;
        push_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            push_u32(&mut out, d)?;
        }
        for &v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Truncated(what));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self, what: &'static str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self, what: &'static str) -> Result<String> {
        let n = self.u32(what)?;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Config(format!("{what} is not UTF-8")))
    }
}

pub fn read_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes };
    if r.take(4, "magic").map_err(|_| Error::BadMagic)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.take(1, "version")?[0];
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let blob = parse_kv(&r.string("config")?)?;
    let mut config = ModelConfig::default();
    let mut stage = None;
    let mut src_vocab = None;
    let mut tgt_vocab = None;
    for (k, v) in &blob {
        match k.as_str() {
            "stage" => stage = Some(v.parse::<Stage>()?),
            "src_tokens" => src_vocab = Some(Vocab::from_tokens(v.split_whitespace())?),
            "tgt_tokens" => tgt_vocab = Some(Vocab::from_tokens(v.split_whitespace())?),
            _ => {
                if !config.set(k, v)? {
                    return Err(Error::Config(format!("unknown checkpoint key {k:?}")));
                }
            }
        }
    }
    let stage = stage.ok_or_else(|| Error::Config("checkpoint config lacks a stage".into()))?;
    let count = r.u32("tensor count")?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let rank = r.u32("tensor rank")?;
        let shape = (0..rank).map(|_| r.u32("tensor dims")).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or(Error::Truncated("tensor data"))?, "tensor data")?;
        let data = raw.chunks_exact(8).map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes")))).collect();
        if params.id(&name).is_some() {
            return Err(Error::Config(format!("duplicate tensor {name:?}")));
        }
        params.add(name, Tensor::new(shape, data)?);
    }
    if !r.bytes.is_empty() {
        return Err(Error::Config(format!("{} trailing bytes after the last tensor", r.bytes.len())));
    }
    let model = Model::from_params(config, stage, params)?;
    Ok(Checkpoint { model, src_vocab, tgt_vocab })
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    fs::write(path, write_checkpoint(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    read_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads a checkpoint and checks that its architecture matches `expected`
/// (dimensions, attention variant, integration side).
pub fn load_checkpoint_expecting<T: Scalar>(path: &Path, expected: &ModelConfig) -> Result<Checkpoint<T>> {
    let ckpt = load_checkpoint(path)?;
    let c = ckpt.model.config();
    let arch = |m: &ModelConfig| (m.src_vocab, m.tgt_vocab, m.model_dim, m.ff_dim, m.layers, m.heads, m.attention, m.integration);
    if arch(c) != arch(expected) {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint holds a {} {}-side model (dim {}), expected {} {}-side (dim {})",
            c.attention, c.integration, c.model_dim, expected.attention, expected.integration, expected.model_dim
        )));
    }
    Ok(ckpt)
}
