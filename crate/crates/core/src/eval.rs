//! Corpus BLEU, contrastive accuracy by antecedent distance, and
//! attention-weight dumps.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use crate::attention::build_context_mask;
use crate::corpus::{ContrastiveItem, BOS, EOS};
use crate::error::{Error, Result};
use crate::graph::log_softmax_rows;
use crate::model::{
    build_decoder_context, build_encoder_context, encode_document, forward_with_context, sentence_forward, ContextCache, GateMode,
    Integration, Model,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn ngram_counts<S: Eq + Hash>(tokens: &[S], n: usize) -> HashMap<&[S], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU in `[0, 100]` with clipped n-gram precisions for
/// `n = 1..=max_n` and a brevity penalty. With `smooth`, precisions for
/// `n ≥ 2` use add-one counts.
pub fn corpus_bleu<S: Eq + Hash>(hypotheses: &[Vec<S>], references: &[Vec<S>], max_n: usize, smooth: bool) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::invalid("corpus_bleu", "empty reference set"));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::invalid("corpus_bleu", format!("{} hypotheses for {} references", hypotheses.len(), references.len())));
    }
    if max_n == 0 {
        return Err(Error::invalid("corpus_bleu", "max_n must be positive"));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += (h.len() + 1).saturating_sub(n);
        }
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let (m, t) = if smooth && n > 0 { (matches[n] + 1, totals[n] + 1) } else { (matches[n], totals[n]) };
        if m == 0 || t == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let bp = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * (log_sum / max_n as f64).exp())
}

/// Distance buckets of the contrastive report.
pub const BUCKETS: [&str; 5] = ["0", "1", "2", "3", ">3"];

pub fn bucket_of(distance: usize) -> usize {
    distance.min(4)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BucketCount {
    pub correct: usize,
    pub total: usize,
}

impl BucketCount {
    /// `None` for an empty bucket.
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ContrastiveReport {
    pub buckets: [BucketCount; 5],
}

impl ContrastiveReport {
    pub fn record(&mut self, distance: usize, correct: bool) {
        let b = &mut self.buckets[bucket_of(distance)];
        b.total += 1;
        b.correct += usize::from(correct);
    }

    pub fn overall(&self) -> BucketCount {
        self.buckets.iter().fold(BucketCount::default(), |a, b| BucketCount { correct: a.correct + b.correct, total: a.total + b.total })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let fmt = |c: &BucketCount| c.accuracy().map_or_else(|| "nan".to_string(), |a| format!("{a:.6}"));
        for (label, c) in BUCKETS.iter().zip(&self.buckets) {
            let key = if *label == ">3" { "gt3" } else { label };
            let _ = writeln!(s, "bucket.{key}.accuracy={}", fmt(c));
            let _ = writeln!(s, "bucket.{key}.count={}", c.total);
        }
        let o = self.overall();
        let _ = writeln!(s, "overall.accuracy={}", fmt(&o));
        let _ = writeln!(s, "overall.count={}", o.total);
        s
    }
}

fn item_correct(item: &ContrastiveItem, mut score: impl FnMut(&[usize]) -> Result<f64>) -> Result<bool> {
    let good = score(&item.correct)?;
    let mut ok = true;
    for f in &item.foils {
        if score(f)? >= good {
            ok = false;
        }
    }
    Ok(ok)
}

/// Scores items with an arbitrary sentence scorer. An item counts as correct
/// iff the correct target scores strictly higher than every foil.
pub fn score_contrastive_with(
    items: &[ContrastiveItem],
    mut score: impl FnMut(&ContrastiveItem, &[usize]) -> Result<f64>,
) -> Result<ContrastiveReport> {
    let mut report = ContrastiveReport::default();
    for item in items {
        let ok = item_correct(item, |t| score(item, t))?;
        report.record(item.distance, ok);
    }
    Ok(report)
}

fn sequence_log_likelihood<T: Scalar>(logits: &Tensor<T>, target: &[usize]) -> f64 {
    let logp = log_softmax_rows(logits);
    target.iter().chain([&EOS]).enumerate().map(|(i, &y)| logp.at(i, y).as_f64()).sum()
}

fn decoder_input(target: &[usize]) -> Vec<usize> {
    let mut p = vec![BOS];
    p.extend_from_slice(target);
    p
}

/// `log P(target | x^j, context)` with the EOS term, teacher-forced.
pub fn candidate_log_likelihood<T: Scalar>(
    model: &Model<T>,
    src_doc: &[Vec<usize>],
    j: usize,
    target: &[usize],
    cache: Option<&ContextCache<T>>,
    gate: GateMode,
) -> Result<f64> {
    let prefix = decoder_input(target);
    let logits = match cache.filter(|_| model.has_context()) {
        Some(c) => forward_with_context(model, src_doc, j, &prefix, c, gate)?.0,
        None => {
            let src = src_doc.get(j).ok_or_else(|| Error::invalid("candidate_log_likelihood", "sentence out of range"))?;
            sentence_forward(model, src, &prefix)?
        }
    };
    Ok(sequence_log_likelihood(&logits, target))
}

/// Context cache for the model's integration side; target-side context is
/// teacher-forced on `tgt_doc`.
pub fn document_cache<T: Scalar>(model: &Model<T>, src_doc: &[Vec<usize>], tgt_doc: Option<&[Vec<usize>]>) -> Result<ContextCache<T>> {
    match model.config().integration {
        Integration::Encoder => build_encoder_context(&encode_document(model, src_doc, None)?),
        Integration::Decoder => {
            let tgt = tgt_doc.ok_or_else(|| Error::invalid("document_cache", "decoder-side context needs target sentences"))?;
            build_decoder_context(&encode_document(model, src_doc, Some(tgt))?)
        }
    }
}

/// Contrastive accuracy of `model`, conditioning on the item's document
/// (reference translations provide the target-side context).
pub fn score_contrastive<T: Scalar>(model: &Model<T>, items: &[ContrastiveItem], gate: GateMode) -> Result<ContrastiveReport> {
    let mut report = ContrastiveReport::default();
    for item in items {
        let cache = if model.has_context() { Some(document_cache(model, &item.doc.src, Some(&item.doc.tgt))?) } else { None };
        let ok = item_correct(item, |t| candidate_log_likelihood(model, &item.doc.src, item.sentence, t, cache.as_ref(), gate))?;
        report.record(item.distance, ok);
    }
    Ok(report)
}

/// One head's view of a query's context.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadDump {
    /// `(sentence, α_s)` for sentences with non-zero weight, by decreasing mass.
    pub ranked: Vec<(usize, f64)>,
    /// Word weights (before rescaling) of each ranked sentence, same order.
    pub words: Vec<Vec<f64>>,
    /// Context sentences open to the query but given exactly zero weight.
    pub pruned: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTraceDump {
    pub sentence: usize,
    pub token: usize,
    pub heads: Vec<HeadDump>,
}

impl AttentionTraceDump {
    /// Head-averaged `α_s`, non-zero entries only, by decreasing mass.
    pub fn mean_ranking(&self) -> Vec<(usize, f64)> {
        let mut acc: HashMap<usize, f64> = HashMap::new();
        for h in &self.heads {
            for &(s, w) in &h.ranked {
                *acc.entry(s).or_insert(0.0) += w / self.heads.len() as f64;
            }
        }
        let mut v: Vec<_> = acc.into_iter().collect();
        sort_by_mass(&mut v);
        v
    }

    pub fn mean_pruned(&self) -> f64 {
        self.heads.iter().map(|h| h.pruned as f64).sum::<f64>() / self.heads.len().max(1) as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "sentence={}", self.sentence);
        let _ = writeln!(s, "token={}", self.token);
        for (h, head) in self.heads.iter().enumerate() {
            for (r, ((sent, mass), words)) in head.ranked.iter().zip(&head.words).enumerate() {
                let ws: Vec<String> = words.iter().map(|w| format!("{w:.6}")).collect();
                let _ = writeln!(s, "head.{h}.rank.{r}=sentence:{sent} mass:{mass:.6} words:{}", ws.join(","));
            }
            let _ = writeln!(s, "head.{h}.pruned={}", head.pruned);
        }
        for (r, (sent, mass)) in self.mean_ranking().iter().enumerate() {
            let _ = writeln!(s, "mean.rank.{r}=sentence:{sent} mass:{mass:.6}");
        }
        s
    }
}

fn sort_by_mass(v: &mut [(usize, f64)]) {
    v.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite weights").then(a.0.cmp(&b.0)));
}

/// Sentence- and word-level weights seen by query `token` of sentence `j`.
/// Encoder-side queries index source tokens; decoder-side queries index
/// decoder input positions (BOS first) over the teacher-forced `tgt_doc[j]`.
pub fn inspect_attention<T: Scalar>(
    model: &Model<T>,
    src_doc: &[Vec<usize>],
    tgt_doc: Option<&[Vec<usize>]>,
    j: usize,
    token: usize,
) -> Result<AttentionTraceDump> {
    let cfg = model.config();
    if !model.has_context() || !cfg.attention.is_hierarchical() {
        return Err(Error::Unsupported(format!(
            "attention inspection is hierarchical-only; this model uses {}",
            if model.has_context() { cfg.attention.to_string() } else { "no context layer".into() }
        )));
    }
    let cache = document_cache(model, src_doc, tgt_doc)?;
    let prefix = match cfg.integration {
        Integration::Encoder => vec![BOS],
        Integration::Decoder => decoder_input(&tgt_doc.expect("checked by document_cache")[j]),
    };
    let (_, trace) = forward_with_context(model, src_doc, j, &prefix, &cache, GateMode::Learned)?;
    let row = trace.query_rows.iter().position(|&r| r == token).ok_or_else(|| {
        Error::invalid("inspect_attention", format!("query {token} of sentence {j} is out of range or has no context"))
    })?;
    let open = build_context_mask(src_doc.len(), j, cfg.setting)?.open_count();
    let heads = trace
        .hier
        .iter()
        .map(|w| {
            let mut ranked: Vec<(usize, f64)> =
                w.sentence.row(row).iter().enumerate().filter(|(_, &p)| p > T::zero()).map(|(s, &p)| (s, p.as_f64())).collect();
            sort_by_mass(&mut ranked);
            let words = ranked.iter().map(|&(s, _)| w.word[s].row(row).iter().map(|v| v.as_f64()).collect()).collect();
            HeadDump { pruned: open - ranked.len(), ranked, words }
        })
        .collect();
    Ok(AttentionTraceDump { sentence: j, token, heads })
}
