//! Model hyperparameters and their `key=value` text form.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::attention::Setting;
use crate::error::{Error, Result};
use crate::normalize::Normalizer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionVariant {
    FlatSentence,
    FlatWord,
    /// Sparsemax over sentences, softmax over words.
    HierSparseSoft,
    /// Sparsemax at both levels.
    HierSparseSparse,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 4] = [
        AttentionVariant::FlatSentence,
        AttentionVariant::FlatWord,
        AttentionVariant::HierSparseSoft,
        AttentionVariant::HierSparseSparse,
    ];

    pub fn is_hierarchical(self) -> bool {
        matches!(self, AttentionVariant::HierSparseSoft | AttentionVariant::HierSparseSparse)
    }

    /// Normalizer used for word-level matching inside hierarchical attention.
    pub fn word_normalizer(self) -> Normalizer {
        match self {
            AttentionVariant::HierSparseSparse => Normalizer::Sparsemax,
            _ => Normalizer::Softmax,
        }
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionVariant::FlatSentence => "flat-sentence",
            AttentionVariant::FlatWord => "flat-word",
            AttentionVariant::HierSparseSoft => "hier-sparse-soft",
            AttentionVariant::HierSparseSparse => "hier-sparse-sparse",
        })
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown attention variant {s:?}")))
    }
}

/// Which stack the document-level context layer sits beside.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Integration {
    /// Monolingual source context.
    Encoder,
    /// Bilingual context: keys from source attention, values from target states.
    Decoder,
}

impl fmt::Display for Integration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Integration::Encoder => "encoder",
            Integration::Decoder => "decoder",
        })
    }
}

impl FromStr for Integration {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Integration::Encoder),
            "decoder" => Ok(Integration::Decoder),
            other => Err(Error::Config(format!("unknown integration {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Sentence,
    Context,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Sentence => "sentence",
            Stage::Context => "context",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sentence" => Ok(Stage::Sentence),
            "context" => Ok(Stage::Context),
            other => Err(Error::Config(format!("unknown stage {other:?}"))),
        }
    }
}

/// Architecture hyperparameters. Defaults are desk-scale; the published
/// configuration is `model_dim=512, ff_dim=2048, layers=4, heads=8`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout_sentence: f64,
    pub dropout_context: f64,
    pub label_smoothing: f64,
    pub attention: AttentionVariant,
    pub integration: Integration,
    pub setting: Setting,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            src_vocab: 0,
            tgt_vocab: 0,
            model_dim: 128,
            ff_dim: 512,
            layers: 2,
            heads: 4,
            dropout_sentence: 0.1,
            dropout_context: 0.2,
            label_smoothing: 0.1,
            attention: AttentionVariant::HierSparseSoft,
            integration: Integration::Encoder,
            setting: Setting::Online,
            layer_norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!("heads={} must divide model_dim={}", self.heads, self.model_dim)));
        }
        if self.layers == 0 || self.ff_dim == 0 {
            return Err(Error::Config("layers and ff_dim must be positive".into()));
        }
        for (name, r) in [
            ("dropout_sentence", self.dropout_sentence),
            ("dropout_context", self.dropout_context),
            ("label_smoothing", self.label_smoothing),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{name}={r} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Applies one `key=value` pair; returns `false` for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value.parse().map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "src_vocab" => self.src_vocab = num(key, value)?,
            "tgt_vocab" => self.tgt_vocab = num(key, value)?,
            "model_dim" => self.model_dim = num(key, value)?,
            "ff_dim" => self.ff_dim = num(key, value)?,
            "layers" => self.layers = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "dropout_sentence" => self.dropout_sentence = num(key, value)?,
            "dropout_context" => self.dropout_context = num(key, value)?,
            "label_smoothing" => self.label_smoothing = num(key, value)?,
            "attention" => self.attention = value.parse()?,
            "integration" => self.integration = value.parse()?,
            "setting" => self.setting = value.parse()?,
            "layer_norm_eps" => self.layer_norm_eps = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("src_vocab", self.src_vocab.to_string()),
            ("tgt_vocab", self.tgt_vocab.to_string()),
            ("model_dim", self.model_dim.to_string()),
            ("ff_dim", self.ff_dim.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("dropout_sentence", fmt_f64(self.dropout_sentence)),
            ("dropout_context", fmt_f64(self.dropout_context)),
            ("label_smoothing", fmt_f64(self.label_smoothing)),
            ("attention", self.attention.to_string()),
            ("integration", self.integration.to_string()),
            ("setting", self.setting.to_string()),
            ("layer_norm_eps", fmt_f64(self.layer_norm_eps)),
        ]
    }
}

/// Shortest decimal that parses back to the same `f64`.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Parses `key=value` lines; blank lines and `#` comments are ignored.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}
