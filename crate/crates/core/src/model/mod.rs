//! The context-aware Transformer: sentence-level encoder/decoder stacks, the
//! document-level context layer, context gating, and checkpoints.

mod checkpoint;
mod config;
mod context;
mod forward;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, MAGIC, VERSION};
pub use config::{parse_kv, AttentionVariant, Integration, ModelConfig, Stage};
pub use context::{
    build_decoder_context, build_encoder_context, context_gate, encode_document, forward_with_context, sentence_forward,
    AttentionTrace, ContextCache, EncodedDocument, TargetStates,
};
pub(crate) mod internal {
    pub(crate) use super::context::{context_step, sentence_memory};
    pub(crate) use super::forward::Packed;
    pub(crate) use super::Stack;
}

pub use forward::{document_forward, positional_encoding, DocumentForward, ForwardOptions, GateMode};

use crate::error::{Error, Result};
use crate::graph::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Spread of the uniform initializer for context-layer projections.
pub const CONTEXT_INIT_RANGE: f64 = 0.05;
/// Initial gain of the context layer's output normalization.
pub const CONTEXT_OUTPUT_GAIN: f64 = 0.1;

#[derive(Clone, Debug)]
pub(crate) struct AttnIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct LnIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct FfIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct EncoderLayerIds {
    pub self_attn: AttnIds,
    pub ln1: LnIds,
    pub ff: FfIds,
    pub ln2: LnIds,
}

#[derive(Clone, Debug)]
pub(crate) struct DecoderLayerIds {
    pub self_attn: AttnIds,
    pub ln1: LnIds,
    pub src_attn: AttnIds,
    pub ln2: LnIds,
    pub ff: FfIds,
    pub ln3: LnIds,
}

/// Parameter handles of one sentence-level Transformer.
#[derive(Clone, Debug)]
pub(crate) struct TransformerIds {
    pub src_emb: ParamId,
    pub tgt_emb: ParamId,
    pub encoder: Vec<EncoderLayerIds>,
    pub decoder: Vec<DecoderLayerIds>,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) enum ContextAttnIds {
    Hier { q_s: ParamId, q_w: ParamId, k_s: ParamId, k_w: ParamId, v_w: ParamId, out: ParamId },
    Flat(AttnIds),
}

#[derive(Clone, Debug)]
pub(crate) struct ContextIds {
    pub attn: ContextAttnIds,
    pub ln1: LnIds,
    pub ff: FfIds,
    pub ln2: LnIds,
    pub w_r: ParamId,
    pub w_d: ParamId,
}

/// Which part of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Embeddings,
    Encoder,
    Decoder,
    Output,
    Context,
    /// Frozen copy of the stage-1 sentence model kept for iterative decoding.
    Base,
}

/// A sentence-level model, optionally extended with a document-level
/// context layer. All tensors live in one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    stage: Stage,
    params: ParamStore<T>,
    main: TransformerIds,
    context: Option<ContextIds>,
    base: Option<TransformerIds>,
}

/// Borrowed view of one sentence-level stack.
#[derive(Clone, Copy)]
pub(crate) struct Stack<'a, T: Scalar> {
    pub params: &'a ParamStore<T>,
    pub ids: &'a TransformerIds,
    pub config: &'a ModelConfig,
}

struct Init<'r> {
    rng: &'r mut ChaCha8Rng,
}

impl Init<'_> {
    fn xavier<T: Scalar>(&mut self, rows: usize, cols: usize) -> Tensor<T> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        self.uniform(&[rows, cols], a)
    }

    fn uniform<T: Scalar>(&mut self, shape: &[usize], a: f64) -> Tensor<T> {
        let dist = Uniform::new_inclusive(-a, a).expect("valid range");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(dist.sample(self.rng))).collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }

    fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("valid std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(dist.sample(self.rng))).collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }
}

fn add_attn<T: Scalar>(s: &mut ParamStore<T>, init: &mut Init, p: &str, d: usize) -> AttnIds {
    AttnIds {
        wq: s.add(format!("{p}.wq"), init.xavier(d, d)),
        wk: s.add(format!("{p}.wk"), init.xavier(d, d)),
        wv: s.add(format!("{p}.wv"), init.xavier(d, d)),
        wo: s.add(format!("{p}.wo"), init.xavier(d, d)),
    }
}

fn add_ln<T: Scalar>(s: &mut ParamStore<T>, p: &str, d: usize, gain: f64) -> LnIds {
    LnIds {
        gain: s.add(format!("{p}.gain"), Tensor::full(&[d], T::lit(gain))),
        bias: s.add(format!("{p}.bias"), Tensor::zeros(&[d])),
    }
}

fn add_ff<T: Scalar>(s: &mut ParamStore<T>, init: &mut Init, p: &str, d: usize, ff: usize, range: Option<f64>) -> FfIds {
    let mut mat = |r, c| match range {
        Some(a) => init.uniform(&[r, c], a),
        None => init.xavier(r, c),
    };
    let w1 = mat(d, ff);
    let w2 = mat(ff, d);
    FfIds {
        w1: s.add(format!("{p}.w1"), w1),
        b1: s.add(format!("{p}.b1"), Tensor::zeros(&[ff])),
        w2: s.add(format!("{p}.w2"), w2),
        b2: s.add(format!("{p}.b2"), Tensor::zeros(&[d])),
    }
}

fn add_transformer<T: Scalar>(s: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> TransformerIds {
    let mut init = Init { rng };
    let d = cfg.model_dim;
    let emb_std = 1.0 / (d as f64).sqrt();
    let src_emb = s.add("src_emb", init.normal(&[cfg.src_vocab, d], emb_std));
    let tgt_emb = s.add("tgt_emb", init.normal(&[cfg.tgt_vocab, d], emb_std));
    let encoder = (0..cfg.layers)
        .map(|l| {
            let p = format!("enc.{l}");
            EncoderLayerIds {
                self_attn: add_attn(s, &mut init, &format!("{p}.self"), d),
                ln1: add_ln(s, &format!("{p}.ln1"), d, 1.0),
                ff: add_ff(s, &mut init, &format!("{p}.ff"), d, cfg.ff_dim, None),
                ln2: add_ln(s, &format!("{p}.ln2"), d, 1.0),
            }
        })
        .collect();
    let decoder = (0..cfg.layers)
        .map(|l| {
            let p = format!("dec.{l}");
            DecoderLayerIds {
                self_attn: add_attn(s, &mut init, &format!("{p}.self"), d),
                ln1: add_ln(s, &format!("{p}.ln1"), d, 1.0),
                src_attn: add_attn(s, &mut init, &format!("{p}.src"), d),
                ln2: add_ln(s, &format!("{p}.ln2"), d, 1.0),
                ff: add_ff(s, &mut init, &format!("{p}.ff"), d, cfg.ff_dim, None),
                ln3: add_ln(s, &format!("{p}.ln3"), d, 1.0),
            }
        })
        .collect();
    let out_w = s.add("out.w", init.xavier(d, cfg.tgt_vocab));
    let out_b = s.add("out.b", Tensor::zeros(&[cfg.tgt_vocab]));
    TransformerIds { src_emb, tgt_emb, encoder, decoder, out_w, out_b }
}

/// Fresh context layer: small-uniform projections, zero gate matrices (so
/// the gate starts at 0.5) and a small output gain, so `d` starts small.
fn add_context<T: Scalar>(s: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> ContextIds {
    let mut init = Init { rng };
    let d = cfg.model_dim;
    let a = CONTEXT_INIT_RANGE;
    let mut proj = |s: &mut ParamStore<T>, name: &str| s.add(format!("ctx.attn.{name}"), init.uniform(&[d, d], a));
    let attn = if cfg.attention.is_hierarchical() {
        ContextAttnIds::Hier {
            q_s: proj(s, "q_s"),
            q_w: proj(s, "q_w"),
            k_s: proj(s, "k_s"),
            k_w: proj(s, "k_w"),
            v_w: proj(s, "v_w"),
            out: proj(s, "out"),
        }
    } else {
        ContextAttnIds::Flat(AttnIds { wq: proj(s, "wq"), wk: proj(s, "wk"), wv: proj(s, "wv"), wo: proj(s, "wo") })
    };
    let ln1 = add_ln(s, "ctx.ln1", d, 1.0);
    let ff = add_ff(s, &mut init, "ctx.ff", d, cfg.ff_dim, Some(a));
    let ln2 = add_ln(s, "ctx.ln2", d, CONTEXT_OUTPUT_GAIN);
    let w_r = s.add("ctx.gate.w_r", Tensor::zeros(&[d, d]));
    let w_d = s.add("ctx.gate.w_d", Tensor::zeros(&[d, d]));
    ContextIds { attn, ln1, ff, ln2, w_r, w_d }
}

fn lookup(s: &ParamStore<impl Scalar>, name: &str) -> Result<ParamId> {
    s.id(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
}

fn resolve_attn<T: Scalar>(s: &ParamStore<T>, p: &str) -> Result<AttnIds> {
    Ok(AttnIds {
        wq: lookup(s, &format!("{p}.wq"))?,
        wk: lookup(s, &format!("{p}.wk"))?,
        wv: lookup(s, &format!("{p}.wv"))?,
        wo: lookup(s, &format!("{p}.wo"))?,
    })
}

fn resolve_ln<T: Scalar>(s: &ParamStore<T>, p: &str) -> Result<LnIds> {
    Ok(LnIds { gain: lookup(s, &format!("{p}.gain"))?, bias: lookup(s, &format!("{p}.bias"))? })
}

fn resolve_ff<T: Scalar>(s: &ParamStore<T>, p: &str) -> Result<FfIds> {
    Ok(FfIds {
        w1: lookup(s, &format!("{p}.w1"))?,
        b1: lookup(s, &format!("{p}.b1"))?,
        w2: lookup(s, &format!("{p}.w2"))?,
        b2: lookup(s, &format!("{p}.b2"))?,
    })
}

fn resolve_transformer<T: Scalar>(s: &ParamStore<T>, cfg: &ModelConfig, prefix: &str) -> Result<TransformerIds> {
    let encoder = (0..cfg.layers)
        .map(|l| {
            let p = format!("{prefix}enc.{l}");
            Ok(EncoderLayerIds {
                self_attn: resolve_attn(s, &format!("{p}.self"))?,
                ln1: resolve_ln(s, &format!("{p}.ln1"))?,
                ff: resolve_ff(s, &format!("{p}.ff"))?,
                ln2: resolve_ln(s, &format!("{p}.ln2"))?,
            })
        })
        .collect::<Result<_>>()?;
    let decoder = (0..cfg.layers)
        .map(|l| {
            let p = format!("{prefix}dec.{l}");
            Ok(DecoderLayerIds {
                self_attn: resolve_attn(s, &format!("{p}.self"))?,
                ln1: resolve_ln(s, &format!("{p}.ln1"))?,
                src_attn: resolve_attn(s, &format!("{p}.src"))?,
                ln2: resolve_ln(s, &format!("{p}.ln2"))?,
                ff: resolve_ff(s, &format!("{p}.ff"))?,
                ln3: resolve_ln(s, &format!("{p}.ln3"))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(TransformerIds {
        src_emb: lookup(s, &format!("{prefix}src_emb"))?,
        tgt_emb: lookup(s, &format!("{prefix}tgt_emb"))?,
        encoder,
        decoder,
        out_w: lookup(s, &format!("{prefix}out.w"))?,
        out_b: lookup(s, &format!("{prefix}out.b"))?,
    })
}

fn resolve_context<T: Scalar>(s: &ParamStore<T>, cfg: &ModelConfig) -> Result<ContextIds> {
    let p = |n: &str| lookup(s, &format!("ctx.attn.{n}"));
    let attn = if cfg.attention.is_hierarchical() {
        ContextAttnIds::Hier { q_s: p("q_s")?, q_w: p("q_w")?, k_s: p("k_s")?, k_w: p("k_w")?, v_w: p("v_w")?, out: p("out")? }
    } else {
        ContextAttnIds::Flat(AttnIds { wq: p("wq")?, wk: p("wk")?, wv: p("wv")?, wo: p("wo")? })
    };
    Ok(ContextIds {
        attn,
        ln1: resolve_ln(s, "ctx.ln1")?,
        ff: resolve_ff(s, "ctx.ff")?,
        ln2: resolve_ln(s, "ctx.ln2")?,
        w_r: lookup(s, "ctx.gate.w_r")?,
        w_d: lookup(s, "ctx.gate.w_d")?,
    })
}

impl<T: Scalar> Model<T> {
    /// A freshly initialized sentence-level Transformer.
    pub fn new_sentence(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        if config.src_vocab == 0 || config.tgt_vocab == 0 {
            return Err(Error::Config("vocabulary sizes must be positive".into()));
        }
        let mut params = ParamStore::new();
        let main = add_transformer(&mut params, rng, &config);
        Ok(Self { config, stage: Stage::Sentence, params, main, context: None, base: None })
    }

    /// Extends a trained sentence model with a freshly initialized context
    /// layer described by `config` (attention variant, integration side,
    /// setting, context dropout). The sentence weights are copied twice: once
    /// as the trainable stacks and once as a frozen base model.
    pub fn with_context(sentence: &Model<T>, config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        if sentence.stage != Stage::Sentence {
            return Err(Error::Config("context model must be initialized from a sentence-stage model".into()));
        }
        let s = &sentence.config;
        if (s.src_vocab, s.tgt_vocab, s.model_dim, s.ff_dim, s.layers, s.heads)
            != (config.src_vocab, config.tgt_vocab, config.model_dim, config.ff_dim, config.layers, config.heads)
        {
            return Err(Error::ConfigMismatch("context config disagrees with the sentence model's dimensions".into()));
        }
        let mut params = sentence.params.clone();
        let context = add_context(&mut params, rng, &config);
        for (_, name, value) in sentence.params.iter() {
            params.add(format!("base.{name}"), value.clone());
        }
        let main = resolve_transformer(&params, &config, "")?;
        let base = resolve_transformer(&params, &config, "base.")?;
        Ok(Self { config, stage: Stage::Context, params, main, context: Some(context), base: Some(base) })
    }

    /// Rebuilds a model around an existing parameter store (e.g. a loaded checkpoint).
    pub fn from_params(config: ModelConfig, stage: Stage, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let main = resolve_transformer(&params, &config, "")?;
        let (context, base) = match stage {
            Stage::Sentence => (None, None),
            Stage::Context => {
                let ctx = resolve_context(&params, &config)?;
                let base = resolve_transformer(&params, &config, "base.").ok();
                (Some(ctx), base)
            }
        };
        let expected = match stage {
            Stage::Sentence => main_size(&config),
            Stage::Context => {
                main_size(&config) * if base.is_some() { 2 } else { 1 } + context_size(&config)
            }
        };
        if params.total_size() != expected {
            return Err(Error::ConfigMismatch(format!(
                "parameter count {} does not match the {} configuration ({expected})",
                params.total_size(),
                config.attention
            )));
        }
        Ok(Self { config, stage, params, main, context, base })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn has_context(&self) -> bool {
        self.context.is_some()
    }

    pub fn has_base(&self) -> bool {
        self.base.is_some()
    }

    /// Number of trainable scalars (excludes the frozen base copy).
    pub fn trainable_size(&self) -> usize {
        self.params.iter().filter(|(id, _, _)| self.group(*id) != ParamGroup::Base).map(|(_, _, v)| v.len()).sum()
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        let name = self.params.name(id);
        if name.starts_with("base.") {
            ParamGroup::Base
        } else if name.starts_with("ctx.") {
            ParamGroup::Context
        } else if name.starts_with("enc.") {
            ParamGroup::Encoder
        } else if name.starts_with("dec.") {
            ParamGroup::Decoder
        } else if name.starts_with("out.") {
            ParamGroup::Output
        } else {
            ParamGroup::Embeddings
        }
    }

    pub(crate) fn stack(&self) -> Stack<'_, T> {
        Stack { params: &self.params, ids: &self.main, config: &self.config }
    }

    pub(crate) fn base_stack(&self) -> Option<Stack<'_, T>> {
        self.base.as_ref().map(|ids| Stack { params: &self.params, ids, config: &self.config })
    }

    pub(crate) fn context_ids(&self) -> Option<&ContextIds> {
        self.context.as_ref()
    }

    /// Gate matrices `(W_r, W_d)` of a context model.
    pub fn gate_params(&self) -> Option<(ParamId, ParamId)> {
        self.context.as_ref().map(|c| (c.w_r, c.w_d))
    }

    /// A sentence-stage model holding the frozen base weights, if present.
    pub fn base_model(&self) -> Option<Model<T>> {
        let mut params = ParamStore::new();
        for (_, name, value) in self.params.iter() {
            if let Some(rest) = name.strip_prefix("base.") {
                params.add(rest.to_string(), value.clone());
            }
        }
        if params.is_empty() {
            return None;
        }
        Model::from_params(self.config.clone(), Stage::Sentence, params).ok()
    }

    /// Replaces a parameter value by name (used by tests and tools that
    /// hand-set weights).
    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = lookup(&self.params, name)?;
        if self.params.get(id).shape() != value.shape() {
            return Err(Error::shape("set_param", format!("{name}: {:?} vs {:?}", self.params.get(id).shape(), value.shape())));
        }
        *self.params.get_mut(id) = value;
        Ok(())
    }
}

/// Scalars in one sentence-level Transformer.
pub fn main_size(cfg: &ModelConfig) -> usize {
    let d = cfg.model_dim;
    let f = cfg.ff_dim;
    let attn = 4 * d * d;
    let ln = 2 * d;
    let ff = d * f + f + f * d + d;
    let enc = attn + ln + ff + ln;
    let dec = 2 * attn + 3 * ln + ff;
    (cfg.src_vocab + cfg.tgt_vocab) * d + cfg.layers * (enc + dec) + d * cfg.tgt_vocab + cfg.tgt_vocab
}

/// Scalars in the context layer for the configured attention variant.
pub fn context_size(cfg: &ModelConfig) -> usize {
    let d = cfg.model_dim;
    let f = cfg.ff_dim;
    let projections = if cfg.attention.is_hierarchical() { 6 } else { 4 };
    projections * d * d + 2 * (2 * d) + (d * f + f + f * d + d) + 2 * d * d
}
