//! Graph construction for the sentence stacks and the context layer.

use crate::attention::{sentence_mask_for_queries, word_mask_from_sentences, SentenceRanges};
use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};
use crate::graph::{Graph, HierInputs, Var};
use crate::normalize::{Mask, Normalizer};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{AttnIds, ContextAttnIds, ContextIds, FfIds, Integration, LnIds, Model, Stack};

/// How the context gate is evaluated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateMode {
    /// `γ = σ(r W_r + d W_d)`.
    Learned,
    /// `γ` fixed to a constant for every coordinate.
    Forced(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub gate: GateMode,
    /// Ignore the context layer even if the model has one.
    pub sentence_only: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self { gate: GateMode::Learned, sentence_only: false }
    }
}

/// Nodes of a teacher-forced pass over one document.
pub struct DocumentForward {
    pub logits: Var,
    /// Gold next tokens, one per logits row.
    pub targets: Vec<usize>,
    /// Target-side sentence ranges over the logits rows.
    pub target_ranges: SentenceRanges,
    pub context: Option<ContextOutput>,
}

/// Result of running the context layer over a set of query rows.
pub struct ContextOutput {
    /// `d`, one row per query (zero rows where the context is empty).
    pub d: Var,
    /// Attention node (hierarchical or flat), if any query had context.
    pub attention: Option<Var>,
    /// Query rows that had at least one open context sentence.
    pub rows: Vec<usize>,
    pub gate: Option<Var>,
}

/// Sinusoidal position table: `sin` on even, `cos` on odd columns.
pub fn positional_encoding<T: Scalar>(positions: &[usize], dim: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(&[positions.len(), dim]);
    for (r, &p) in positions.iter().enumerate() {
        let row = out.row_mut(r);
        for (i, v) in row.iter_mut().enumerate() {
            let angle = p as f64 / 10000f64.powf((i - i % 2) as f64 / dim as f64);
            *v = T::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    out
}

/// Sentences flattened into one token sequence.
pub(crate) struct Packed {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub ranges: SentenceRanges,
}

impl Packed {
    pub fn new<S: AsRef<[usize]>>(sentences: &[S]) -> Self {
        let lengths: Vec<usize> = sentences.iter().map(|s| s.as_ref().len()).collect();
        let ids = sentences.iter().flat_map(|s| s.as_ref().iter().copied()).collect();
        let positions = lengths.iter().flat_map(|&n| 0..n).collect();
        Self { ids, positions, ranges: SentenceRanges::from_lengths(&lengths) }
    }

    pub fn single(sentence: &[usize]) -> Self {
        Self::new(&[sentence])
    }

    fn owners(&self) -> Vec<usize> {
        self.ranges.owners()
    }
}

/// Decoder inputs (`BOS y`) and outputs (`y EOS`) for teacher forcing.
pub(crate) fn teacher_pair(y: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(y.len() + 1);
    input.push(BOS);
    input.extend_from_slice(y);
    let mut output = y.to_vec();
    output.push(EOS);
    (input, output)
}

fn block_mask(q: &[usize], k: &[usize], causal: Option<(&[usize], &[usize])>) -> Option<Mask> {
    let single = q.iter().chain(k).all(|&o| o == q.first().copied().unwrap_or(0));
    if single && causal.is_none() {
        return None;
    }
    Some(match causal {
        Some((qp, kp)) => Mask::from_fn(q.len(), k.len(), |r, c| q[r] != k[c] || kp[c] > qp[r]),
        None => Mask::from_fn(q.len(), k.len(), |r, c| q[r] != k[c]),
    })
}

fn layer_norm<T: Scalar>(g: &mut Graph<'_, T>, x: Var, ln: &LnIds, eps: f64) -> Result<Var> {
    let (gain, bias) = (g.param(ln.gain), g.param(ln.bias));
    g.layer_norm(x, gain, bias, T::lit(eps))
}

fn feed_forward<T: Scalar>(g: &mut Graph<'_, T>, x: Var, ff: &FfIds) -> Result<Var> {
    let (w1, b1, w2, b2) = (g.param(ff.w1), g.param(ff.b1), g.param(ff.w2), g.param(ff.b2));
    let h = g.linear(x, w1, Some(b1))?;
    let h = g.relu(h)?;
    g.linear(h, w2, Some(b2))
}

fn multi_head<T: Scalar>(g: &mut Graph<'_, T>, a: &AttnIds, xq: Var, xkv: Var, heads: usize, mask: Option<&Mask>) -> Result<Var> {
    let (wq, wk, wv, wo) = (g.param(a.wq), g.param(a.wk), g.param(a.wv), g.param(a.wo));
    let q = g.matmul(xq, wq)?;
    let k = g.matmul(xkv, wk)?;
    let v = g.matmul(xkv, wv)?;
    let att = g.attention(q, k, v, heads, mask, Normalizer::Softmax)?;
    g.matmul(att, wo)
}

fn embed<T: Scalar>(g: &mut Graph<'_, T>, table: crate::graph::ParamId, packed: &Packed, dim: usize) -> Result<Var> {
    let vocab = g.store().get(table).rows();
    if let Some(&bad) = packed.ids.iter().find(|&&t| t >= vocab) {
        return Err(Error::TokenOutOfRange { id: bad, size: vocab });
    }
    if packed.ids.is_empty() {
        return Err(Error::invalid("embed", "empty token sequence"));
    }
    let t = g.param(table);
    let e = g.embedding(t, &packed.ids)?;
    let e = g.scale(e, T::lit(dim as f64).sqrt())?;
    let pe = g.input(positional_encoding(&packed.positions, dim))?;
    g.add(e, pe)
}

impl<'s, T: Scalar> Stack<'s, T> {
    /// Encoder over a packed document; sentences attend only within themselves.
    pub(crate) fn encode(&self, g: &mut Graph<'_, T>, src: &Packed, rate: T) -> Result<Var> {
        let cfg = self.config;
        let owners = src.owners();
        let mask = block_mask(&owners, &owners, None);
        let x = embed(g, self.ids.src_emb, src, cfg.model_dim)?;
        let mut x = g.dropout(x, rate)?;
        for layer in &self.ids.encoder {
            let a = multi_head(g, &layer.self_attn, x, x, cfg.heads, mask.as_ref())?;
            let a = g.dropout(a, rate)?;
            let s = g.add(x, a)?;
            x = layer_norm(g, s, &layer.ln1, cfg.layer_norm_eps)?;
            let f = feed_forward(g, x, &layer.ff)?;
            let f = g.dropout(f, rate)?;
            let s = g.add(x, f)?;
            x = layer_norm(g, s, &layer.ln2, cfg.layer_norm_eps)?;
        }
        Ok(x)
    }

    /// Decoder over packed target inputs. Returns the last layer's raw
    /// source-attention output and the final hidden states.
    pub(crate) fn decode(&self, g: &mut Graph<'_, T>, tgt: &Packed, memory: Var, src_ranges: &SentenceRanges, rate: T) -> Result<(Var, Var)> {
        let cfg = self.config;
        let t_owners = tgt.owners();
        let s_owners = src_ranges.owners();
        if t_owners.last() != s_owners.last() {
            return Err(Error::shape("decode", "source and target sentence counts differ"));
        }
        let self_mask = block_mask(&t_owners, &t_owners, Some((&tgt.positions, &tgt.positions)));
        let cross_mask = block_mask(&t_owners, &s_owners, None);
        let y = embed(g, self.ids.tgt_emb, tgt, cfg.model_dim)?;
        let mut y = g.dropout(y, rate)?;
        let mut last_c = None;
        for layer in &self.ids.decoder {
            let a = multi_head(g, &layer.self_attn, y, y, cfg.heads, self_mask.as_ref())?;
            let a = g.dropout(a, rate)?;
            let s = g.add(y, a)?;
            y = layer_norm(g, s, &layer.ln1, cfg.layer_norm_eps)?;
            let c = multi_head(g, &layer.src_attn, y, memory, cfg.heads, cross_mask.as_ref())?;
            last_c = Some(c);
            let c = g.dropout(c, rate)?;
            let s = g.add(y, c)?;
            y = layer_norm(g, s, &layer.ln2, cfg.layer_norm_eps)?;
            let f = feed_forward(g, y, &layer.ff)?;
            let f = g.dropout(f, rate)?;
            let s = g.add(y, f)?;
            y = layer_norm(g, s, &layer.ln3, cfg.layer_norm_eps)?;
        }
        Ok((last_c.expect("at least one decoder layer"), y))
    }

    pub(crate) fn project(&self, g: &mut Graph<'_, T>, h: Var) -> Result<Var> {
        let (w, b) = (g.param(self.ids.out_w), g.param(self.ids.out_b));
        g.linear(h, w, Some(b))
    }
}

/// Keys, values and layout of the document context, as graph nodes.
pub(crate) struct ContextNodes {
    pub k_w: Var,
    pub v_w: Var,
    pub k_s: Var,
    pub v_s: Var,
    pub ranges: SentenceRanges,
}

impl ContextNodes {
    /// Sentence keys and values are per-sentence means of the word rows.
    pub fn from_words<T: Scalar>(g: &mut Graph<'_, T>, k_w: Var, v_w: Var, ranges: SentenceRanges) -> Result<Self> {
        let k_s = g.segment_mean(k_w, ranges.ranges())?;
        let v_s = if k_w == v_w { k_s } else { g.segment_mean(v_w, ranges.ranges())? };
        Ok(Self { k_w, v_w, k_s, v_s, ranges })
    }
}

/// Context attention sub-layer followed by the feed-forward sub-layer, each
/// with layer norm and no residual, then the gate. Query rows whose sentence
/// has no open context get `d = 0`.
pub(crate) fn context_layer<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &Model<T>,
    queries: Var,
    query_sentences: &[usize],
    ctx: &ContextNodes,
    rate: T,
) -> Result<ContextOutput> {
    let cfg = model.config();
    let ids: &ContextIds = model.context_ids().ok_or_else(|| Error::Config("model has no context layer".into()))?;
    let n = g.value(queries).rows();
    let dim = cfg.model_dim;
    if query_sentences.len() != n {
        return Err(Error::shape("context_layer", format!("{} sentence labels for {n} queries", query_sentences.len())));
    }
    let j_total = ctx.ranges.len();
    if let Some(&bad) = query_sentences.iter().find(|&&j| j >= j_total) {
        return Err(Error::invalid("context_layer", format!("query sentence {bad} outside a {j_total}-sentence context")));
    }
    let full_mask = sentence_mask_for_queries(query_sentences, j_total, cfg.setting)?;
    let rows: Vec<usize> = (0..n).filter(|&r| !full_mask.row_fully_blocked(r)).collect();
    if rows.is_empty() {
        let d = g.input(Tensor::zeros(&[n, dim]))?;
        return Ok(ContextOutput { d, attention: None, rows, gate: None });
    }
    let active: Vec<usize> = rows.iter().map(|&r| query_sentences[r]).collect();
    let mask = sentence_mask_for_queries(&active, j_total, cfg.setting)?;
    let q = if rows.len() == n { queries } else { g.gather_rows(queries, &rows)? };

    let (mixed, attention) = match &ids.attn {
        ContextAttnIds::Hier { q_s, q_w, k_s, k_w, v_w, out } => {
            let [pqs, pqw, pks, pkw, pvw, po] = [*q_s, *q_w, *k_s, *k_w, *v_w, *out].map(|p| g.param(p));
            let inputs = HierInputs {
                q_s: g.matmul(q, pqs)?,
                q_w: g.matmul(q, pqw)?,
                k_s: g.matmul(ctx.k_s, pks)?,
                k_w: g.matmul(ctx.k_w, pkw)?,
                v_w: g.matmul(ctx.v_w, pvw)?,
            };
            let att = g.hier_attention(inputs, cfg.heads, &ctx.ranges, Some(&mask), cfg.attention.word_normalizer())?;
            (g.matmul(att, po)?, att)
        }
        ContextAttnIds::Flat(a) => match cfg.attention {
            super::AttentionVariant::FlatSentence => flat(g, a, q, ctx.k_s, ctx.v_s, cfg.heads, &mask)?,
            _ => {
                let wmask = word_mask_from_sentences(&mask, &ctx.ranges);
                flat(g, a, q, ctx.k_w, ctx.v_w, cfg.heads, &wmask)?
            }
        },
    };
    let x = g.dropout(mixed, rate)?;
    let x = layer_norm(g, x, &ids.ln1, cfg.layer_norm_eps)?;
    let x = feed_forward(g, x, &ids.ff)?;
    let x = g.dropout(x, rate)?;
    let x = layer_norm(g, x, &ids.ln2, cfg.layer_norm_eps)?;
    let d = if rows.len() == n { x } else { g.scatter_rows(x, &rows, n)? };
    Ok(ContextOutput { d, attention: Some(attention), rows, gate: None })
}

fn flat<T: Scalar>(g: &mut Graph<'_, T>, a: &AttnIds, q: Var, k: Var, v: Var, heads: usize, mask: &Mask) -> Result<(Var, Var)> {
    let (wq, wk, wv, wo) = (g.param(a.wq), g.param(a.wk), g.param(a.wv), g.param(a.wo));
    let qp = g.matmul(q, wq)?;
    let kp = g.matmul(k, wk)?;
    let vp = g.matmul(v, wv)?;
    let att = g.attention(qp, kp, vp, heads, Some(mask), Normalizer::Softmax)?;
    Ok((g.matmul(att, wo)?, att))
}

/// `r̃ = γ⊙r + (1−γ)⊙d`; returns `(r̃, γ)`.
pub(crate) fn gate<T: Scalar>(g: &mut Graph<'_, T>, model: &Model<T>, r: Var, d: Var, mode: GateMode) -> Result<(Var, Var)> {
    let shape = g.value(r).shape().to_vec();
    if g.value(d).shape() != shape.as_slice() {
        return Err(Error::shape("context_gate", format!("r {:?} vs d {:?}", shape, g.value(d).shape())));
    }
    let gamma = match mode {
        GateMode::Forced(v) => g.input(Tensor::full(&shape, T::lit(v)))?,
        GateMode::Learned => {
            let ids = model.context_ids().ok_or_else(|| Error::Config("model has no context layer".into()))?;
            let (wr, wd) = (g.param(ids.w_r), g.param(ids.w_d));
            let zr = g.matmul(r, wr)?;
            let zd = g.matmul(d, wd)?;
            let z = g.add(zr, zd)?;
            g.sigmoid(z)?
        }
    };
    let one = g.input(Tensor::full(&shape, T::one()))?;
    let rest = g.sub(one, gamma)?;
    let a = g.mul(gamma, r)?;
    let b = g.mul(rest, d)?;
    Ok((g.add(a, b)?, gamma))
}

fn check_document<S: AsRef<[usize]>>(src: &[S], tgt: &[S]) -> Result<()> {
    if src.is_empty() {
        return Err(Error::invalid("document_forward", "empty document"));
    }
    if src.len() != tgt.len() {
        return Err(Error::Misaligned { doc: 0, detail: format!("{} source vs {} target sentences", src.len(), tgt.len()) });
    }
    if src.iter().any(|s| s.as_ref().is_empty()) {
        return Err(Error::invalid("document_forward", "empty source sentence"));
    }
    Ok(())
}

/// Teacher-forced pass over a whole document with the model's trainable
/// stacks. Every sentence is a query; its context follows the configured
/// setting. Dropout is active iff `g` is a training graph: the stacks use
/// `dropout_sentence`, the context layer `dropout_context`.
///
/// Parameter values are read through `g`, so the graph may run over any
/// store laid out like the model's (a perturbed copy, for instance).
pub fn document_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &Model<T>,
    src: &[Vec<usize>],
    tgt: &[Vec<usize>],
    opts: ForwardOptions,
) -> Result<DocumentForward> {
    check_document(src, tgt)?;
    let stack = model.stack();
    let cfg = model.config();
    let use_context = model.has_context() && !opts.sentence_only;
    let rate = T::lit(cfg.dropout_sentence);
    let ctx_rate = T::lit(cfg.dropout_context);

    let src_packed = Packed::new(src);
    let (inputs, outputs): (Vec<_>, Vec<_>) = tgt.iter().map(|y| teacher_pair(y)).unzip();
    let tgt_packed = Packed::new(&inputs);
    let targets: Vec<usize> = outputs.concat();

    let z = stack.encode(g, &src_packed, rate)?;
    let (hidden, context) = match (use_context, cfg.integration) {
        (false, _) => (stack.decode(g, &tgt_packed, z, &src_packed.ranges, rate)?.1, None),
        (true, Integration::Encoder) => {
            let nodes = ContextNodes::from_words(g, z, z, src_packed.ranges.clone())?;
            let owners = src_packed.ranges.owners();
            let mut out = context_layer(g, model, z, &owners, &nodes, ctx_rate)?;
            let (memory, gamma) = gate(g, model, z, out.d, opts.gate)?;
            out.gate = Some(gamma);
            (stack.decode(g, &tgt_packed, memory, &src_packed.ranges, rate)?.1, Some(out))
        }
        (true, Integration::Decoder) => {
            let (c, h) = stack.decode(g, &tgt_packed, z, &src_packed.ranges, rate)?;
            let nodes = ContextNodes::from_words(g, c, h, tgt_packed.ranges.clone())?;
            let owners = tgt_packed.ranges.owners();
            let mut out = context_layer(g, model, c, &owners, &nodes, ctx_rate)?;
            let (mixed, gamma) = gate(g, model, h, out.d, opts.gate)?;
            out.gate = Some(gamma);
            (mixed, Some(out))
        }
    };
    let logits = stack.project(g, hidden)?;
    Ok(DocumentForward { logits, targets, target_ranges: tgt_packed.ranges, context })
}
