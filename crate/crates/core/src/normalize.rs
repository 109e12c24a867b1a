//! Row normalizers (softmax / sparsemax) and attention masks.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sparsemax;
use crate::tensor::Tensor;

/// Boolean `rows × cols` mask; `true` marks an entry that is excluded
/// (an additive `-inf`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    blocked: Vec<bool>,
}

impl Mask {
    pub fn none(rows: usize, cols: usize) -> Self {
        Self { rows, cols, blocked: vec![false; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut blocked = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                blocked.push(f(r, c));
            }
        }
        Self { rows, cols, blocked }
    }

    /// Lower-triangular self-attention mask.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| c > r)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn blocked(&self, r: usize, c: usize) -> bool {
        self.blocked[r * self.cols + c]
    }

    pub fn row_fully_blocked(&self, r: usize) -> bool {
        self.blocked[r * self.cols..(r + 1) * self.cols].iter().all(|&b| b)
    }

    /// Additive view with `0` for open entries and `-inf` for blocked ones.
    pub fn additive<T: Scalar>(&self) -> Tensor<T> {
        let data = self.blocked.iter().map(|&b| if b { T::neg_infinity() } else { T::zero() }).collect();
        Tensor::matrix(self.rows, self.cols, data).expect("mask dims")
    }

    pub(crate) fn check(&self, rows: usize, cols: usize, op: &'static str) -> Result<()> {
        if self.rows != rows || self.cols != cols {
            return Err(Error::shape(op, format!("mask {}x{} vs scores {rows}x{cols}", self.rows, self.cols)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Normalizer {
    Softmax,
    Sparsemax,
}

impl fmt::Display for Normalizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalizer::Softmax => "softmax",
            Normalizer::Sparsemax => "sparsemax",
        })
    }
}

impl FromStr for Normalizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Normalizer::Softmax),
            "sparsemax" => Ok(Normalizer::Sparsemax),
            other => Err(Error::Config(format!("unknown normalizer {other:?}"))),
        }
    }
}

/// Row-wise softmax along the last axis, max-subtracted.
///
/// Masked entries get exactly zero probability.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>, mask: Option<&Mask>) -> Result<Tensor<T>> {
    logits.ensure_finite("softmax")?;
    let (rows, cols) = (logits.rows(), logits.cols());
    if cols == 0 {
        return Err(Error::invalid("softmax", "empty axis"));
    }
    if let Some(m) = mask {
        m.check(rows, cols, "softmax")?;
    }
    let mut out = Tensor::zeros(logits.shape());
    for r in 0..rows {
        let open = |c: usize| mask.is_none_or(|m| !m.blocked(r, c));
        let x = logits.row(r);
        let mut max = T::neg_infinity();
        for (c, &v) in x.iter().enumerate() {
            if open(c) && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            return Err(Error::AllMasked { row: r });
        }
        let o = out.row_mut(r);
        let mut total = T::zero();
        for c in 0..cols {
            if open(c) {
                let e = (x[c] - max).exp();
                o[c] = e;
                total += e;
            }
        }
        for v in o.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

/// `p ⊙ (g - <p, g>)` for one row.
pub(crate) fn softmax_backward_row<T: Scalar>(p: &[T], g: &[T], out: &mut [T]) {
    let dot: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
    for ((o, &pi), &gi) in out.iter_mut().zip(p).zip(g) {
        *o = pi * (gi - dot);
    }
}

pub fn normalize_rows<T: Scalar>(scores: &Tensor<T>, mask: Option<&Mask>, normalizer: Normalizer) -> Result<Tensor<T>> {
    match normalizer {
        Normalizer::Softmax => softmax_rows(scores, mask),
        Normalizer::Sparsemax => Ok(sparsemax::sparsemax_rows(scores, mask)?.probs),
    }
}

/// Backward pass of [`normalize_rows`] given its output `probs`.
pub fn normalize_backward<T: Scalar>(probs: &Tensor<T>, upstream: &Tensor<T>, normalizer: Normalizer) -> Result<Tensor<T>> {
    let mut out = Tensor::zeros(probs.shape());
    normalize_backward_into(probs.data(), upstream.data(), probs.cols(), normalizer, out.data_mut())?;
    Ok(out)
}

pub(crate) fn normalize_backward_into<T: Scalar>(
    probs: &[T],
    upstream: &[T],
    cols: usize,
    normalizer: Normalizer,
    out: &mut [T],
) -> Result<()> {
    for ((p, g), o) in probs.chunks(cols).zip(upstream.chunks(cols)).zip(out.chunks_mut(cols)) {
        match normalizer {
            Normalizer::Softmax => softmax_backward_row(p, g, o),
            Normalizer::Sparsemax => sparsemax::backward_row(p, g, o)?,
        }
    }
    Ok(())
}
