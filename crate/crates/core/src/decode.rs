//! Greedy sentence decoding and two-pass iterative document decoding.

use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{
    build_decoder_context, build_encoder_context, encode_document, ContextCache, GateMode, Integration, Model,
};
use crate::model::internal::{context_step, sentence_memory, Packed, Stack};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Plain decoder step over a fixed encoder memory; returns the last row's logits.
fn step_logits<T: Scalar>(stack: Stack<'_, T>, memory: &Tensor<T>, prefix: &[usize]) -> Result<Vec<T>> {
    let mut g = Graph::new(stack.params);
    let mem = g.input(memory.clone())?;
    let src_ranges = crate::attention::SentenceRanges::from_lengths(&[memory.rows()]);
    let (_, h) = stack.decode(&mut g, &Packed::single(prefix), mem, &src_ranges, T::zero())?;
    let n = prefix.len();
    let last = g.slice_rows(h, n - 1, n)?;
    let logits = stack.project(&mut g, last)?;
    Ok(g.value(logits).data().to_vec())
}

fn greedy_loop(max_len: usize, mut next: impl FnMut(&[usize]) -> Result<Vec<f64>>) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::invalid("greedy_decode", "max_len must be at least 1"));
    }
    let mut prefix = vec![BOS];
    while prefix.len() <= max_len {
        let tok = argmax(&next(&prefix)?);
        if tok == EOS {
            break;
        }
        prefix.push(tok);
    }
    prefix.remove(0);
    Ok(prefix)
}

fn greedy_with_stack<T: Scalar>(stack: Stack<'_, T>, src: &[usize], max_len: usize) -> Result<Vec<usize>> {
    let mut g = Graph::new(stack.params);
    let z = stack.encode(&mut g, &Packed::single(src), T::zero())?;
    let memory = g.value(z).clone();
    greedy_loop(max_len, |p| Ok(step_logits(stack, &memory, p)?.iter().map(|v| v.as_f64()).collect()))
}

/// Argmax decoding of sentence `j` of `src_doc`, at most `max_len` tokens
/// (EOS excluded). Without a cache the context layer is bypassed.
pub fn greedy_decode<T: Scalar>(
    model: &Model<T>,
    src_doc: &[Vec<usize>],
    j: usize,
    cache: Option<&ContextCache<T>>,
    max_len: usize,
) -> Result<Vec<usize>> {
    let src = src_doc.get(j).ok_or_else(|| Error::invalid("greedy_decode", format!("sentence {j} out of range")))?;
    let Some(cache) = cache.filter(|_| model.has_context()) else {
        return greedy_with_stack(model.stack(), src, max_len);
    };
    let memory = sentence_memory(model, src_doc, j, Some(cache), GateMode::Learned)?;
    match model.config().integration {
        Integration::Encoder => {
            greedy_loop(max_len, |p| Ok(step_logits(model.stack(), &memory, p)?.iter().map(|v| v.as_f64()).collect()))
        }
        Integration::Decoder => greedy_loop(max_len, |p| {
            let mut g = Graph::new(model.params());
            let (logits, _) = context_step(&mut g, model, src_doc, j, p, cache, GateMode::Learned, Some(&memory))?;
            Ok(g.value(logits).row(p.len() - 1).iter().map(|v| v.as_f64()).collect())
        }),
    }
}

/// Output of every pass of [`iterative_decode`]; the last one is final.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IterativeOutput {
    pub passes: Vec<Vec<Vec<usize>>>,
}

impl IterativeOutput {
    pub fn output(&self) -> &[Vec<usize>] {
        self.passes.last().expect("at least one pass")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeOptions {
    pub max_len: usize,
    /// Total passes for decoder-side models (1 = sentence-level only).
    pub passes: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self { max_len: 64, passes: 2 }
    }
}

/// Sentence-level translation of every sentence, using the frozen base
/// model when the checkpoint carries one.
pub fn sentence_pass<T: Scalar>(model: &Model<T>, src_doc: &[Vec<usize>], max_len: usize) -> Result<Vec<Vec<usize>>> {
    let stack = model.base_stack().unwrap_or_else(|| model.stack());
    src_doc.iter().map(|s| greedy_with_stack(stack, s, max_len)).collect()
}

/// Re-decodes every sentence with the context model, taking the target
/// context of all sentences from `current` at once.
pub fn refine_pass<T: Scalar>(model: &Model<T>, src_doc: &[Vec<usize>], current: &[Vec<usize>], max_len: usize) -> Result<Vec<Vec<usize>>> {
    let doc = encode_document(model, src_doc, Some(current))?;
    let cache = build_decoder_context(&doc)?;
    (0..src_doc.len()).map(|j| greedy_decode(model, src_doc, j, Some(&cache), max_len)).collect()
}

/// Context-aware decoding of one document. Encoder-side models take a
/// single pass over the fixed source context; decoder-side models are
/// initialized with the sentence model and then refined `passes − 1` times.
pub fn iterative_decode<T: Scalar>(model: &Model<T>, src_doc: &[Vec<usize>], opts: DecodeOptions) -> Result<IterativeOutput> {
    if src_doc.is_empty() {
        return Err(Error::invalid("iterative_decode", "empty document"));
    }
    if !model.has_context() {
        return Ok(IterativeOutput { passes: vec![sentence_pass(model, src_doc, opts.max_len)?] });
    }
    match model.config().integration {
        Integration::Encoder => {
            let cache = build_encoder_context(&encode_document(model, src_doc, None)?)?;
            let out = (0..src_doc.len()).map(|j| greedy_decode(model, src_doc, j, Some(&cache), opts.max_len)).collect::<Result<_>>()?;
            Ok(IterativeOutput { passes: vec![out] })
        }
        Integration::Decoder => {
            let mut passes = vec![sentence_pass(model, src_doc, opts.max_len)?];
            for _ in 1..opts.passes.max(1) {
                let next = refine_pass(model, src_doc, passes.last().expect("pass"), opts.max_len)?;
                passes.push(next);
            }
            Ok(IterativeOutput { passes })
        }
    }
}

/// One left-to-right pass: encoder-side models read the source context,
/// decoder-side models fall back to the sentence-level pass since no target
/// context exists yet.
pub fn single_pass_decode<T: Scalar>(model: &Model<T>, src_doc: &[Vec<usize>], max_len: usize) -> Result<Vec<Vec<usize>>> {
    if model.has_context() && model.config().integration == Integration::Encoder {
        return Ok(iterative_decode(model, src_doc, DecodeOptions { max_len, passes: 1 })?.passes.remove(0));
    }
    sentence_pass(model, src_doc, max_len)
}
