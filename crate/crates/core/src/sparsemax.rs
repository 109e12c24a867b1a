//! Sparsemax: Euclidean projection onto the probability simplex.
//!
//! Unlike softmax, the projection can put exactly zero mass on low-scoring
//! entries, which is what lets the hierarchical attention ignore whole
//! sentences.

use crate::error::{Error, Result};
use crate::normalize::Mask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Score given to masked entries before projection. Far enough below any real
/// score that a masked entry can never enter the support.
pub const MASKED_SCORE: f64 = -1e9;

#[derive(Clone, Debug, PartialEq)]
pub struct SparsemaxResult<T> {
    /// Projected distributions, one per row of the input.
    pub probs: Tensor<T>,
    /// `true` iff the matching probability is strictly positive.
    pub support: Vec<bool>,
    /// Threshold per projected row.
    pub tau: Vec<T>,
}

impl<T: Scalar> SparsemaxResult<T> {
    pub fn support_size(&self, row: usize) -> usize {
        let c = self.probs.cols();
        self.support[row * c..(row + 1) * c].iter().filter(|&&s| s).count()
    }
}

/// Projects a single score vector.
pub fn sparsemax<T: Scalar>(z: &[T]) -> Result<SparsemaxResult<T>> {
    sparsemax_rows(&Tensor::vector(z.to_vec()), None)
}

/// Projects every row of `z`; masked entries are forced outside the support.
pub fn sparsemax_rows<T: Scalar>(z: &Tensor<T>, mask: Option<&Mask>) -> Result<SparsemaxResult<T>> {
    let (rows, cols) = (z.rows(), z.cols());
    if cols == 0 || z.is_empty() {
        return Err(Error::invalid("sparsemax", "empty score vector"));
    }
    z.ensure_finite("sparsemax")?;
    if let Some(m) = mask {
        m.check(rows, cols, "sparsemax")?;
    }
    let mut probs = Tensor::zeros(z.shape());
    let mut tau = Vec::with_capacity(rows);
    let mut scratch = Vec::with_capacity(cols);
    let mut row_buf = vec![T::zero(); cols];
    for r in 0..rows {
        row_buf.copy_from_slice(z.row(r));
        if let Some(m) = mask {
            if m.row_fully_blocked(r) {
                return Err(Error::AllMasked { row: r });
            }
            for (c, v) in row_buf.iter_mut().enumerate() {
                if m.blocked(r, c) {
                    *v = T::lit(MASKED_SCORE);
                }
            }
        }
        tau.push(project_row(&row_buf, probs.row_mut(r), &mut scratch));
    }
    let support = probs.data().iter().map(|&p| p > T::zero()).collect();
    Ok(SparsemaxResult { probs, support, tau })
}

/// Sort-and-threshold projection of one row; returns the threshold. Scores
/// are taken relative to the row maximum, which makes the result exactly
/// invariant to representable shifts.
pub(crate) fn project_row<T: Scalar>(z: &[T], out: &mut [T], sorted: &mut Vec<T>) -> T {
    let top = z.iter().copied().fold(T::neg_infinity(), T::max);
    sorted.clear();
    sorted.extend(z.iter().map(|&v| v - top));
    sorted.sort_unstable_by(|a, b| b.partial_cmp(a).expect("finite scores"));

    // Support size is the largest k with 1 + k·z_(k) > Σ_{j≤k} z_(j). A
    // margin within rounding error of zero counts as equality.
    let slack = T::epsilon() * T::lit(8.0);
    let mut cumsum = T::zero();
    let mut support_sum = T::zero();
    let mut k_star = 0usize;
    for (i, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let kv = T::from_usize(i + 1).unwrap() * v;
        if T::one() + kv - cumsum > slack * (T::one() + kv.abs() + cumsum.abs()) {
            k_star = i + 1;
            support_sum = cumsum;
        }
    }
    debug_assert!(k_star >= 1);
    let tau = (support_sum - T::one()) / T::from_usize(k_star).unwrap();
    let last = sorted[k_star - 1];
    for (o, &v) in out.iter_mut().zip(z) {
        let u = v - top;
        *o = if u >= last { (u - tau).max(T::zero()) } else { T::zero() };
    }
    tau + top
}

/// Jacobian-vector product of the projection, conditioned on the support of
/// the forward result: `g_i - mean_{support}(g)` on the support, 0 elsewhere.
pub fn sparsemax_backward<T: Scalar>(upstream: &Tensor<T>, result: &SparsemaxResult<T>) -> Result<Tensor<T>> {
    if upstream.len() != result.probs.len() {
        return Err(Error::shape(
            "sparsemax_backward",
            format!("upstream {:?} vs result {:?}", upstream.shape(), result.probs.shape()),
        ));
    }
    let mut out = Tensor::zeros(result.probs.shape());
    for r in 0..result.probs.rows() {
        backward_row(result.probs.row(r), upstream.row(r), out.row_mut(r))?;
    }
    Ok(out)
}

pub(crate) fn backward_row<T: Scalar>(probs: &[T], upstream: &[T], out: &mut [T]) -> Result<()> {
    let mut sum = T::zero();
    let mut count = 0usize;
    for (&p, &g) in probs.iter().zip(upstream) {
        if p > T::zero() {
            sum += g;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("sparsemax_backward", "empty support"));
    }
    let mean = sum / T::from_usize(count).unwrap();
    for ((o, &p), &g) in out.iter_mut().zip(probs).zip(upstream) {
        *o = if p > T::zero() { g - mean } else { T::zero() };
    }
    Ok(())
}
