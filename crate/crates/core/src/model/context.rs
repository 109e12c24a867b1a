//! Document encoding, context caches, and per-sentence context-aware forward passes.

use crate::attention::{AttentionWeights, SentenceRanges};
use crate::error::{Error, Result};
use crate::graph::{sigmoid, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::forward::{context_layer, gate, teacher_pair, ContextNodes, GateMode, Packed};
use super::{AttentionVariant, Integration, Model, Stack};

/// Per-document keys and values read by the context layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextCache<T> {
    pub side: Integration,
    /// One row per context token.
    pub k_w: Tensor<T>,
    pub v_w: Tensor<T>,
    /// One row per sentence.
    pub k_s: Tensor<T>,
    pub v_s: Tensor<T>,
    pub ranges: SentenceRanges,
}

/// Teacher-forced target-side states of every sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetStates<T> {
    /// Raw source-attention output of the last decoder layer, per sentence
    /// (`(len + 1) × model_dim`, one row per decoder input position).
    pub context_vectors: Vec<Tensor<T>>,
    /// Final decoder hidden states, same layout.
    pub hidden: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedDocument<T> {
    /// Last encoder layer output per source sentence.
    pub encoder_outputs: Vec<Tensor<T>>,
    pub target: Option<TargetStates<T>>,
}

/// Weights recorded by the context layer for one sentence's queries.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace<T> {
    pub variant: AttentionVariant,
    pub sentence: usize,
    /// Query rows that had context; weight rows follow this order.
    pub query_rows: Vec<usize>,
    /// Per head, for hierarchical variants.
    pub hier: Vec<AttentionWeights<T>>,
    /// Per head, for flat variants.
    pub flat: Vec<Tensor<T>>,
    /// Gate value per query row and coordinate.
    pub gate: Option<Tensor<T>>,
}

fn split_rows<T: Scalar>(t: &Tensor<T>, ranges: &SentenceRanges) -> Vec<Tensor<T>> {
    ranges.ranges().iter().map(|r| t.row_block(r.start, r.end)).collect()
}

fn concat<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let cols = parts.first().map_or(0, |p| p.cols());
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        if p.cols() != cols {
            return Err(Error::shape("context_cache", "rows of differing width"));
        }
        rows += p.rows();
        data.extend_from_slice(p.data());
    }
    Tensor::matrix(rows, cols, data)
}

fn segment_means<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let cols = parts.first().map_or(0, |p| p.cols());
    let mut out = Tensor::zeros(&[parts.len(), cols]);
    for (j, p) in parts.iter().enumerate() {
        if p.rows() == 0 {
            return Err(Error::invalid("context_cache", format!("sentence {j} has no tokens")));
        }
        let inv = T::one() / T::from_usize(p.rows()).unwrap();
        let row = out.row_mut(j);
        for r in 0..p.rows() {
            for (o, &v) in row.iter_mut().zip(p.row(r)) {
                *o += v;
            }
        }
        for o in row.iter_mut() {
            *o *= inv;
        }
    }
    Ok(out)
}

pub(crate) fn encode_with<T: Scalar>(stack: Stack<'_, T>, src: &[Vec<usize>], tgt: Option<&[Vec<usize>]>) -> Result<EncodedDocument<T>> {
    if src.is_empty() {
        return Err(Error::invalid("encode_document", "empty document"));
    }
    if src.iter().any(|s| s.is_empty()) {
        return Err(Error::invalid("encode_document", "empty source sentence"));
    }
    let mut g = Graph::new(stack.params);
    let src_packed = Packed::new(src);
    let z = stack.encode(&mut g, &src_packed, T::zero())?;
    let encoder_outputs = split_rows(g.value(z), &src_packed.ranges);
    let target = match tgt {
        None => None,
        Some(tgt) => {
            if tgt.len() != src.len() {
                return Err(Error::Misaligned { doc: 0, detail: format!("{} source vs {} target sentences", src.len(), tgt.len()) });
            }
            let inputs: Vec<Vec<usize>> = tgt.iter().map(|y| teacher_pair(y).0).collect();
            let tgt_packed = Packed::new(&inputs);
            let (c, h) = stack.decode(&mut g, &tgt_packed, z, &src_packed.ranges, T::zero())?;
            Some(TargetStates {
                context_vectors: split_rows(g.value(c), &tgt_packed.ranges),
                hidden: split_rows(g.value(h), &tgt_packed.ranges),
            })
        }
    };
    Ok(EncodedDocument { encoder_outputs, target })
}

/// Runs the model's stacks (no context, no dropout) over a document. Target
/// states are teacher-forced on `tgt` when given.
pub fn encode_document<T: Scalar>(model: &Model<T>, src: &[Vec<usize>], tgt: Option<&[Vec<usize>]>) -> Result<EncodedDocument<T>> {
    encode_with(model.stack(), src, tgt)
}

/// Monolingual cache: word keys and values are the encoder outputs, sentence
/// keys and values their per-sentence means.
pub fn build_encoder_context<T: Scalar>(doc: &EncodedDocument<T>) -> Result<ContextCache<T>> {
    if doc.encoder_outputs.is_empty() {
        return Err(Error::invalid("build_encoder_context", "empty document"));
    }
    let words = concat(&doc.encoder_outputs)?;
    let sentences = segment_means(&doc.encoder_outputs)?;
    let lengths: Vec<usize> = doc.encoder_outputs.iter().map(|t| t.rows()).collect();
    Ok(ContextCache {
        side: Integration::Encoder,
        k_w: words.clone(),
        v_w: words,
        k_s: sentences.clone(),
        v_s: sentences,
        ranges: SentenceRanges::from_lengths(&lengths),
    })
}

/// Bilingual cache: keys from the source-attention context vectors, values
/// from the target hidden states.
pub fn build_decoder_context<T: Scalar>(doc: &EncodedDocument<T>) -> Result<ContextCache<T>> {
    let target = doc
        .target
        .as_ref()
        .ok_or_else(|| Error::invalid("build_decoder_context", "document has no target-side states"))?;
    if target.hidden.is_empty() {
        return Err(Error::invalid("build_decoder_context", "empty document"));
    }
    let lengths: Vec<usize> = target.hidden.iter().map(|t| t.rows()).collect();
    Ok(ContextCache {
        side: Integration::Decoder,
        k_w: concat(&target.context_vectors)?,
        v_w: concat(&target.hidden)?,
        k_s: segment_means(&target.context_vectors)?,
        v_s: segment_means(&target.hidden)?,
        ranges: SentenceRanges::from_lengths(&lengths),
    })
}

/// `γ = σ(r W_r + d W_d)`, `r̃ = γ⊙r + (1−γ)⊙d`, row-wise over tokens.
pub fn context_gate<T: Scalar>(r: &Tensor<T>, d: &Tensor<T>, w_r: &Tensor<T>, w_d: &Tensor<T>) -> Result<Tensor<T>> {
    if r.shape() != d.shape() {
        return Err(Error::shape("context_gate", format!("r {:?} vs d {:?}", r.shape(), d.shape())));
    }
    let n = r.cols();
    for w in [w_r, w_d] {
        if w.shape() != [n, n] {
            return Err(Error::shape("context_gate", format!("gate matrix {:?} for width {n}", w.shape())));
        }
    }
    let mut z = r.matmul(w_r)?;
    z.add_assign(&d.matmul(w_d)?);
    let data = z
        .data()
        .iter()
        .zip(r.data().iter().zip(d.data()))
        .map(|(&zi, (&ri, &di))| {
            let g = sigmoid(zi);
            g * ri + (T::one() - g) * di
        })
        .collect();
    Tensor::new(r.shape().to_vec(), data)
}

fn cache_nodes<T: Scalar>(g: &mut Graph<'_, T>, cache: &ContextCache<T>) -> Result<ContextNodes> {
    let k_w = g.input(cache.k_w.clone())?;
    let v_w = if cache.v_w == cache.k_w { k_w } else { g.input(cache.v_w.clone())? };
    let k_s = g.input(cache.k_s.clone())?;
    let v_s = if cache.v_s == cache.k_s { k_s } else { g.input(cache.v_s.clone())? };
    Ok(ContextNodes { k_w, v_w, k_s, v_s, ranges: cache.ranges.clone() })
}

fn check_prefix(prefix: &[usize]) -> Result<()> {
    if prefix.is_empty() {
        return Err(Error::invalid("forward", "target prefix must contain at least BOS"));
    }
    Ok(())
}

pub(crate) fn sentence_logits_with<T: Scalar>(stack: Stack<'_, T>, src: &[usize], prefix: &[usize]) -> Result<Tensor<T>> {
    check_prefix(prefix)?;
    let mut g = Graph::new(stack.params);
    let sp = Packed::single(src);
    let z = stack.encode(&mut g, &sp, T::zero())?;
    let (_, h) = stack.decode(&mut g, &Packed::single(prefix), z, &sp.ranges, T::zero())?;
    let logits = stack.project(&mut g, h)?;
    Ok(g.value(logits).clone())
}

/// Context-agnostic Transformer pass. `prefix` is the decoder input (it
/// should start with BOS); row `n` of the result scores the token after
/// `prefix[..=n]`.
pub fn sentence_forward<T: Scalar>(model: &Model<T>, src: &[usize], prefix: &[usize]) -> Result<Tensor<T>> {
    sentence_logits_with(model.stack(), src, prefix)
}

/// Scores the decoder input `prefix` for sentence `j` of `src_doc` given a
/// prebuilt context cache.
pub fn forward_with_context<T: Scalar>(
    model: &Model<T>,
    src_doc: &[Vec<usize>],
    j: usize,
    prefix: &[usize],
    cache: &ContextCache<T>,
    gate_mode: GateMode,
) -> Result<(Tensor<T>, AttentionTrace<T>)> {
    let mut g = Graph::new(model.params());
    let (logits, trace) = context_step(&mut g, model, src_doc, j, prefix, cache, gate_mode, None)?;
    Ok((g.value(logits).clone(), trace))
}

/// Graph-level body of [`forward_with_context`]. `memory` lets decoding
/// reuse an encoder-side memory across steps.
#[allow(clippy::too_many_arguments)]
pub(crate) fn context_step<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &Model<T>,
    src_doc: &[Vec<usize>],
    j: usize,
    prefix: &[usize],
    cache: &ContextCache<T>,
    gate_mode: GateMode,
    memory: Option<&Tensor<T>>,
) -> Result<(Var, AttentionTrace<T>)> {
    check_prefix(prefix)?;
    let cfg = model.config();
    if !model.has_context() {
        return Err(Error::Config("forward_with_context needs a context-stage model".into()));
    }
    if cache.side != cfg.integration {
        return Err(Error::invalid(
            "forward_with_context",
            format!("cache built for {} side, model integrates on {} side", cache.side, cfg.integration),
        ));
    }
    if cache.ranges.len() != src_doc.len() {
        return Err(Error::invalid(
            "forward_with_context",
            format!("cache covers {} sentences, document has {}", cache.ranges.len(), src_doc.len()),
        ));
    }
    let src = src_doc
        .get(j)
        .ok_or_else(|| Error::invalid("forward_with_context", format!("sentence {j} out of range")))?;
    let stack = model.stack();
    let zero = T::zero();
    let sp = Packed::single(src);
    let tp = Packed::single(prefix);
    let nodes = cache_nodes(g, cache)?;

    let (hidden, out) = match cfg.integration {
        Integration::Encoder => {
            let (mem, out) = match memory {
                Some(m) => (g.input(m.clone())?, None),
                None => {
                    let z = stack.encode(g, &sp, zero)?;
                    let n = g.value(z).rows();
                    let out = context_layer(g, model, z, &vec![j; n], &nodes, zero)?;
                    let (mixed, gamma) = gate(g, model, z, out.d, gate_mode)?;
                    (mixed, Some((out, gamma)))
                }
            };
            (stack.decode(g, &tp, mem, &sp.ranges, zero)?.1, out)
        }
        Integration::Decoder => {
            let z = match memory {
                Some(m) => g.input(m.clone())?,
                None => stack.encode(g, &sp, zero)?,
            };
            let (c, h) = stack.decode(g, &tp, z, &sp.ranges, zero)?;
            let out = context_layer(g, model, c, &vec![j; prefix.len()], &nodes, zero)?;
            let (mixed, gamma) = gate(g, model, h, out.d, gate_mode)?;
            (mixed, Some((out, gamma)))
        }
    };
    let logits = stack.project(g, hidden)?;
    let mut trace = AttentionTrace { variant: cfg.attention, sentence: j, query_rows: Vec::new(), hier: Vec::new(), flat: Vec::new(), gate: None };
    if let Some((out, gamma)) = out {
        trace.query_rows = out.rows;
        trace.gate = Some(g.value(gamma).clone());
        if let Some(att) = out.attention {
            if let Some(w) = g.hier_weights(att) {
                trace.hier = w.to_vec();
            } else if let Some(w) = g.attention_weights(att) {
                trace.flat = w.to_vec();
            }
        }
    }
    Ok((logits, trace))
}

/// Encoder-side memory `r̃` for sentence `j` (the plain encoder output for
/// decoder-side models). Decoding steps reuse it.
pub(crate) fn sentence_memory<T: Scalar>(
    model: &Model<T>,
    src_doc: &[Vec<usize>],
    j: usize,
    cache: Option<&ContextCache<T>>,
    gate_mode: GateMode,
) -> Result<Tensor<T>> {
    let mut g = Graph::new(model.params());
    let stack = model.stack();
    let sp = Packed::single(&src_doc[j]);
    let z = stack.encode(&mut g, &sp, T::zero())?;
    let mem = match (cache, model.config().integration) {
        (Some(cache), Integration::Encoder) if model.has_context() => {
            let nodes = cache_nodes(&mut g, cache)?;
            let n = g.value(z).rows();
            let out = context_layer(&mut g, model, z, &vec![j; n], &nodes, T::zero())?;
            gate(&mut g, model, z, out.d, gate_mode)?.0
        }
        _ => z,
    };
    Ok(g.value(mem).clone())
}
