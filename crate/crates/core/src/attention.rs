//! Attention kernels over plain tensors.
//!
//! Scaled dot-product attention with a pluggable normalizer, the four-step
//! hierarchical attention (sentence matching, word matching, rescaling,
//! value reading) and the multi-head wrappers around both. The graph ops in
//! [`crate::graph`] call the same forward kernels and the backward kernels
//! defined here.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::normalize::{normalize_backward, normalize_rows, Mask, Normalizer};
use crate::scalar::Scalar;
use crate::sparsemax;
use crate::tensor::Tensor;

/// Which context sentences a query may see.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Setting {
    /// Past and future sentences; only the query's own sentence is hidden.
    Offline,
    /// Past sentences only.
    Online,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Offline => "offline",
            Setting::Online => "online",
        })
    }
}

impl FromStr for Setting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "offline" => Ok(Setting::Offline),
            "online" => Ok(Setting::Online),
            other => Err(Error::Config(format!("unknown setting {other:?}"))),
        }
    }
}

/// Sentence-level mask for queries from one sentence of a document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextMask {
    pub setting: Setting,
    /// `true` for masked (additive `-inf`) sentences.
    pub blocked: Vec<bool>,
}

impl ContextMask {
    pub fn additive<T: Scalar>(&self) -> Vec<T> {
        self.blocked.iter().map(|&b| if b { T::neg_infinity() } else { T::zero() }).collect()
    }

    /// No sentence is left to attend to (single-sentence documents, or the
    /// first sentence in the online setting).
    pub fn is_degenerate(&self) -> bool {
        self.blocked.iter().all(|&b| b)
    }

    pub fn open_count(&self) -> usize {
        self.blocked.iter().filter(|&&b| !b).count()
    }
}

pub fn build_context_mask(sentences: usize, current: usize, setting: Setting) -> Result<ContextMask> {
    if current >= sentences {
        return Err(Error::invalid(
            "build_context_mask",
            format!("sentence {current} out of range for a {sentences}-sentence document"),
        ));
    }
    let blocked = (0..sentences)
        .map(|j| match setting {
            Setting::Offline => j == current,
            Setting::Online => j >= current,
        })
        .collect();
    Ok(ContextMask { setting, blocked })
}

/// Token-offset ranges of the sentences in a flattened document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentenceRanges(Vec<Range<usize>>);

impl SentenceRanges {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut start = 0;
        let ranges = lengths
            .iter()
            .map(|&len| {
                let r = start..start + len;
                start += len;
                r
            })
            .collect();
        Self(ranges)
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> usize {
        self.0.last().map_or(0, |r| r.end)
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.0.iter().map(|r| r.len()).collect()
    }

    /// Sentence index of every token.
    pub fn owners(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total());
        for (j, r) in self.0.iter().enumerate() {
            out.extend(std::iter::repeat_n(j, r.len()));
        }
        out
    }
}

/// Weights produced by one hierarchical attention head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T> {
    /// `queries × sentences`
    pub sentence: Tensor<T>,
    /// Per sentence, `queries × words-in-sentence`, before rescaling.
    pub word: Vec<Tensor<T>>,
    /// `queries × context words`, rescaled by the sentence weights.
    pub hier: Tensor<T>,
}

fn inv_sqrt<T: Scalar>(d: usize) -> T {
    T::one() / T::from_usize(d).unwrap().sqrt()
}

/// `weights = normalizer(QKᵀ/√d_k + mask)`, `output = weights · V`.
pub fn scaled_dot_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: Option<&Mask>,
    normalizer: Normalizer,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("Q {:?}, K {:?}, V {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let mut scores = q.matmul_t(k)?;
    scores.scale_assign(inv_sqrt(q.cols()));
    let weights = normalize_rows(&scores, mask, normalizer)?;
    let out = weights.matmul(v)?;
    Ok((out, weights))
}

pub(crate) struct SdpaGrads<T> {
    pub dq: Tensor<T>,
    pub dk: Tensor<T>,
    pub dv: Tensor<T>,
}

pub(crate) fn scaled_dot_attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    weights: &Tensor<T>,
    upstream: &Tensor<T>,
    normalizer: Normalizer,
) -> Result<SdpaGrads<T>> {
    let scale = inv_sqrt::<T>(q.cols());
    let dv = weights.t_matmul(upstream)?;
    let dw = upstream.matmul_t(v)?;
    let mut ds = normalize_backward(weights, &dw, normalizer)?;
    ds.scale_assign(scale);
    let dq = ds.matmul(k)?;
    let dk = ds.t_matmul(q)?;
    Ok(SdpaGrads { dq, dk, dv })
}

/// Sentence-level key matching: `sparsemax(Q_s K_sᵀ/√d_k + mask)`.
pub fn sentence_attention_weights<T: Scalar>(q_s: &Tensor<T>, k_s: &Tensor<T>, mask: Option<&Mask>) -> Result<Tensor<T>> {
    if q_s.cols() != k_s.cols() {
        return Err(Error::shape("sentence_attention_weights", format!("{:?} vs {:?}", q_s.shape(), k_s.shape())));
    }
    let mut scores = q_s.matmul_t(k_s)?;
    scores.scale_assign(inv_sqrt(q_s.cols()));
    Ok(sparsemax::sparsemax_rows(&scores, mask)?.probs)
}

/// Word-level key matching, one distribution per sentence.
pub fn word_attention_weights<T: Scalar>(
    q_w: &Tensor<T>,
    k_w: &Tensor<T>,
    ranges: &SentenceRanges,
    normalizer: Normalizer,
) -> Result<Vec<Tensor<T>>> {
    if q_w.cols() != k_w.cols() || ranges.total() != k_w.rows() {
        return Err(Error::shape(
            "word_attention_weights",
            format!("Q_w {:?}, K_w {:?}, {} ranged words", q_w.shape(), k_w.shape(), ranges.total()),
        ));
    }
    let mut scores = q_w.matmul_t(k_w)?;
    scores.scale_assign(inv_sqrt(q_w.cols()));
    ranges
        .ranges()
        .iter()
        .map(|r| {
            if r.is_empty() {
                return Err(Error::invalid("word_attention_weights", "empty sentence"));
            }
            normalize_rows(&scores.col_block(r.start, r.end), None, normalizer)
        })
        .collect()
}

/// `α_hier^j = α_s(j) · α_w^j`, concatenated over sentences in order.
pub fn rescale_hierarchical<T: Scalar>(
    alpha_s: &Tensor<T>,
    alpha_w: &[Tensor<T>],
    ranges: &SentenceRanges,
) -> Result<Tensor<T>> {
    let n = alpha_s.rows();
    if alpha_s.cols() != ranges.len() || alpha_w.len() != ranges.len() {
        return Err(Error::shape(
            "rescale_hierarchical",
            format!("{} sentence weights, {} word blocks, {} ranges", alpha_s.cols(), alpha_w.len(), ranges.len()),
        ));
    }
    let mut hier = Tensor::zeros(&[n, ranges.total()]);
    for (j, (r, w)) in ranges.ranges().iter().zip(alpha_w).enumerate() {
        if w.rows() != n || w.cols() != r.len() {
            return Err(Error::shape("rescale_hierarchical", format!("word block {j} is {:?}", w.shape())));
        }
        for i in 0..n {
            let s = alpha_s.at(i, j);
            let dst = &mut hier.row_mut(i)[r.clone()];
            for (d, &a) in dst.iter_mut().zip(w.row(i)) {
                *d = s * a;
            }
        }
    }
    Ok(hier)
}

/// Single-head hierarchical attention: sentence matching, word matching,
/// rescaling and value reading, composed in that order.
#[allow(clippy::too_many_arguments)]
pub fn h_attention<T: Scalar>(
    q_s: &Tensor<T>,
    q_w: &Tensor<T>,
    k_s: &Tensor<T>,
    k_w: &Tensor<T>,
    v_w: &Tensor<T>,
    ranges: &SentenceRanges,
    mask: Option<&Mask>,
    word_normalizer: Normalizer,
) -> Result<(Tensor<T>, AttentionWeights<T>)> {
    h_attention_impl(q_s, q_w, k_s, k_w, v_w, ranges, mask, word_normalizer, false)
}

/// Same result as [`h_attention`], but word matching only runs for
/// (query, sentence) pairs with non-zero sentence weight. Word weights of
/// pruned pairs are left at zero in the returned trace.
#[allow(clippy::too_many_arguments)]
pub fn h_attention_pruned<T: Scalar>(
    q_s: &Tensor<T>,
    q_w: &Tensor<T>,
    k_s: &Tensor<T>,
    k_w: &Tensor<T>,
    v_w: &Tensor<T>,
    ranges: &SentenceRanges,
    mask: Option<&Mask>,
    word_normalizer: Normalizer,
) -> Result<(Tensor<T>, AttentionWeights<T>)> {
    h_attention_impl(q_s, q_w, k_s, k_w, v_w, ranges, mask, word_normalizer, true)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn h_attention_impl<T: Scalar>(
    q_s: &Tensor<T>,
    q_w: &Tensor<T>,
    k_s: &Tensor<T>,
    k_w: &Tensor<T>,
    v_w: &Tensor<T>,
    ranges: &SentenceRanges,
    mask: Option<&Mask>,
    word_normalizer: Normalizer,
    prune: bool,
) -> Result<(Tensor<T>, AttentionWeights<T>)> {
    if q_s.rows() != q_w.rows() || k_s.rows() != ranges.len() || k_w.rows() != v_w.rows() {
        return Err(Error::shape(
            "h_attention",
            format!(
                "Q_s {:?}, Q_w {:?}, K_s {:?}, K_w {:?}, V_w {:?}, {} sentences",
                q_s.shape(),
                q_w.shape(),
                k_s.shape(),
                k_w.shape(),
                v_w.shape(),
                ranges.len()
            ),
        ));
    }
    let sentence = sentence_attention_weights(q_s, k_s, mask)?;
    let word = if prune {
        pruned_word_weights(q_w, k_w, ranges, &sentence, word_normalizer)?
    } else {
        word_attention_weights(q_w, k_w, ranges, word_normalizer)?
    };
    let hier = rescale_hierarchical(&sentence, &word, ranges)?;
    let out = hier.matmul(v_w)?;
    Ok((out, AttentionWeights { sentence, word, hier }))
}

fn pruned_word_weights<T: Scalar>(
    q_w: &Tensor<T>,
    k_w: &Tensor<T>,
    ranges: &SentenceRanges,
    sentence: &Tensor<T>,
    normalizer: Normalizer,
) -> Result<Vec<Tensor<T>>> {
    if q_w.cols() != k_w.cols() || ranges.total() != k_w.rows() {
        return Err(Error::shape("h_attention_pruned", format!("Q_w {:?}, K_w {:?}", q_w.shape(), k_w.shape())));
    }
    let scale = inv_sqrt::<T>(q_w.cols());
    let mut blocks = Vec::with_capacity(ranges.len());
    for (j, r) in ranges.ranges().iter().enumerate() {
        let keys = k_w.row_block(r.start, r.end);
        let mut block = Tensor::zeros(&[q_w.rows(), r.len()]);
        for i in 0..q_w.rows() {
            if sentence.at(i, j) == T::zero() {
                continue;
            }
            let q = Tensor::matrix(1, q_w.cols(), q_w.row(i).to_vec())?;
            let mut s = q.matmul_t(&keys)?;
            s.scale_assign(scale);
            let p = normalize_rows(&s, None, normalizer)?;
            block.row_mut(i).copy_from_slice(p.data());
        }
        blocks.push(block);
    }
    Ok(blocks)
}

pub(crate) struct HierGrads<T> {
    pub dq_s: Tensor<T>,
    pub dq_w: Tensor<T>,
    pub dk_s: Tensor<T>,
    pub dk_w: Tensor<T>,
    pub dv_w: Tensor<T>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn h_attention_backward<T: Scalar>(
    q_s: &Tensor<T>,
    q_w: &Tensor<T>,
    k_s: &Tensor<T>,
    k_w: &Tensor<T>,
    v_w: &Tensor<T>,
    ranges: &SentenceRanges,
    weights: &AttentionWeights<T>,
    upstream: &Tensor<T>,
    word_normalizer: Normalizer,
) -> Result<HierGrads<T>> {
    let n = q_s.rows();
    let scale = inv_sqrt::<T>(q_s.cols());
    let dv_w = weights.hier.t_matmul(upstream)?;
    let d_hier = upstream.matmul_t(v_w)?;

    let mut d_sentence = Tensor::zeros(&[n, ranges.len()]);
    let mut dq_w = Tensor::zeros(q_w.shape());
    let mut dk_w = Tensor::zeros(k_w.shape());
    for (j, r) in ranges.ranges().iter().enumerate() {
        let w = &weights.word[j];
        let mut dw = Tensor::zeros(w.shape());
        let mut any = false;
        for i in 0..n {
            let s = weights.sentence.at(i, j);
            let dh = &d_hier.row(i)[r.clone()];
            let ds: T = dh.iter().zip(w.row(i)).map(|(&a, &b)| a * b).sum();
            d_sentence.set(i, j, ds);
            if s != T::zero() {
                any = true;
                for (o, &g) in dw.row_mut(i).iter_mut().zip(dh) {
                    *o = s * g;
                }
            }
        }
        if !any {
            continue;
        }
        let mut dscore = normalize_backward(w, &dw, word_normalizer)?;
        dscore.scale_assign(scale);
        let keys = k_w.row_block(r.start, r.end);
        dq_w.add_assign(&dscore.matmul(&keys)?);
        let dk = dscore.t_matmul(q_w)?;
        let c = k_w.cols();
        for (t, row) in r.clone().enumerate() {
            for (o, &g) in dk_w.data_mut()[row * c..(row + 1) * c].iter_mut().zip(dk.row(t)) {
                *o += g;
            }
        }
    }
    let mut dscore_s = normalize_backward(&weights.sentence, &d_sentence, Normalizer::Sparsemax)?;
    dscore_s.scale_assign(scale);
    let dq_s = dscore_s.matmul(k_s)?;
    let dk_s = dscore_s.t_matmul(q_s)?;
    Ok(HierGrads { dq_s, dq_w, dk_s, dk_w, dv_w })
}

/// Per-head projection matrices for the five-input hierarchical multi-head
/// attention. Every matrix is `model_dim × model_dim`; head `h` owns columns
/// `h·d_k .. (h+1)·d_k` of each input projection. `out` is `W^O`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadProjections<T> {
    pub heads: usize,
    pub q_s: Tensor<T>,
    pub q_w: Tensor<T>,
    pub k_s: Tensor<T>,
    pub k_w: Tensor<T>,
    pub v_w: Tensor<T>,
    pub out: Tensor<T>,
}

impl<T: Scalar> HeadProjections<T> {
    pub fn identity(dim: usize, heads: usize) -> Self {
        let eye = identity(dim);
        Self {
            heads,
            q_s: eye.clone(),
            q_w: eye.clone(),
            k_s: eye.clone(),
            k_w: eye.clone(),
            v_w: eye.clone(),
            out: eye,
        }
    }
}

/// Projections for flat (single-level) multi-head attention.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatProjections<T> {
    pub heads: usize,
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub out: Tensor<T>,
}

pub fn identity<T: Scalar>(dim: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[dim, dim]);
    for i in 0..dim {
        t.set(i, i, T::one());
    }
    t
}

pub(crate) fn head_dim(model_dim: usize, heads: usize, op: &'static str) -> Result<usize> {
    if heads == 0 || model_dim % heads != 0 {
        return Err(Error::invalid(op, format!("{heads} heads do not divide model_dim {model_dim}")));
    }
    Ok(model_dim / heads)
}

/// `Concat(head_1..head_H)·W^O` where each head runs [`h_attention`] on its
/// own projections of all five inputs.
#[allow(clippy::too_many_arguments)]
pub fn h_multi_head<T: Scalar>(
    q_s: &Tensor<T>,
    k_s: &Tensor<T>,
    q_w: &Tensor<T>,
    k_w: &Tensor<T>,
    v_w: &Tensor<T>,
    ranges: &SentenceRanges,
    mask: Option<&Mask>,
    word_normalizer: Normalizer,
    proj: &HeadProjections<T>,
) -> Result<(Tensor<T>, Vec<AttentionWeights<T>>)> {
    let dim = proj.out.rows();
    let dk = head_dim(dim, proj.heads, "h_multi_head")?;
    let pq_s = q_s.matmul(&proj.q_s)?;
    let pq_w = q_w.matmul(&proj.q_w)?;
    let pk_s = k_s.matmul(&proj.k_s)?;
    let pk_w = k_w.matmul(&proj.k_w)?;
    let pv_w = v_w.matmul(&proj.v_w)?;
    let mut concat = Tensor::zeros(&[q_s.rows(), dim]);
    let mut traces = Vec::with_capacity(proj.heads);
    for h in 0..proj.heads {
        let cols = h * dk..(h + 1) * dk;
        let (out, w) = h_attention(
            &pq_s.col_block(cols.start, cols.end),
            &pq_w.col_block(cols.start, cols.end),
            &pk_s.col_block(cols.start, cols.end),
            &pk_w.col_block(cols.start, cols.end),
            &pv_w.col_block(cols.start, cols.end),
            ranges,
            mask,
            word_normalizer,
        )?;
        concat.set_col_block(cols.start, &out);
        traces.push(w);
    }
    Ok((concat.matmul(&proj.out)?, traces))
}

/// Which granularity flat context attention reads from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlatLevel {
    Sentence,
    Word,
}

/// Standard softmax multi-head attention; `k`/`v` are sentence-level or
/// word-level rows depending on the caller's [`FlatLevel`].
pub fn flat_multi_head<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: Option<&Mask>,
    proj: &FlatProjections<T>,
) -> Result<Tensor<T>> {
    let dim = proj.out.rows();
    let dk = head_dim(dim, proj.heads, "flat_multi_head")?;
    let pq = q.matmul(&proj.q)?;
    let pk = k.matmul(&proj.k)?;
    let pv = v.matmul(&proj.v)?;
    let mut concat = Tensor::zeros(&[q.rows(), dim]);
    for h in 0..proj.heads {
        let (s, e) = (h * dk, (h + 1) * dk);
        let (out, _) = scaled_dot_attention(
            &pq.col_block(s, e),
            &pk.col_block(s, e),
            &pv.col_block(s, e),
            mask,
            Normalizer::Softmax,
        )?;
        concat.set_col_block(s, &out);
    }
    concat.matmul(&proj.out)
}

/// Expands per-query sentence masks into a `queries × sentences` [`Mask`].
pub fn sentence_mask_for_queries(query_sentences: &[usize], sentences: usize, setting: Setting) -> Result<Mask> {
    let rows = query_sentences
        .iter()
        .map(|&j| build_context_mask(sentences, j, setting))
        .collect::<Result<Vec<_>>>()?;
    Ok(Mask::from_fn(query_sentences.len(), sentences, |r, c| rows[r].blocked[c]))
}

/// Word-level mask derived from a sentence-level one: a word is blocked iff
/// its sentence is.
pub fn word_mask_from_sentences(sentence_mask: &Mask, ranges: &SentenceRanges) -> Mask {
    let owners = ranges.owners();
    Mask::from_fn(sentence_mask.rows(), owners.len(), |r, c| sentence_mask.blocked(r, owners[c]))
}
