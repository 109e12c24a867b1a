//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive applied to [`Var`] handles. Parameters
//! live in a [`ParamStore`] that the graph borrows; [`Graph::backward`] adds
//! the gradient of a scalar root into a [`Grads`] buffer aligned with the
//! store. Calling it twice without [`Grads::zero`] accumulates.

use std::collections::HashMap;
use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AttentionWeights, SentenceRanges};
use crate::error::{Error, Result};
use crate::normalize::{self, Mask, Normalizer};
use crate::scalar::Scalar;
use crate::sparsemax;
use crate::tensor::{gemm_into, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    /// Registers a tensor; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn total_size(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Gradient accumulators aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T> {
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self { grads: store.values.iter().map(|v| Tensor::zeros(v.shape())).collect() }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn scale(&mut self, c: T) {
        for g in &mut self.grads {
            g.scale_assign(c);
        }
    }

    pub fn global_norm(&self) -> T {
        self.grads.iter().flat_map(|g| g.data()).map(|&v| v * v).sum::<T>().sqrt()
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    SegmentMean(Var, Vec<Range<usize>>),
    MaskedFill(Var, Vec<bool>),
    Softmax(Var),
    Sparsemax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor<T>, rstd: Vec<T> },
    Dropout(Var, Vec<T>),
    CrossEntropy { logits: Var, targets: Vec<usize>, eps: T, probs: Tensor<T> },
    Sum(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, normalizer: Normalizer, weights: Vec<Tensor<T>> },
    HierAttention { inputs: [Var; 5], heads: usize, ranges: SentenceRanges, normalizer: Normalizer, weights: Vec<AttentionWeights<T>> },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Inputs of a hierarchical multi-head attention op, already projected.
#[derive(Clone, Copy, Debug)]
pub struct HierInputs {
    pub q_s: Var,
    pub q_w: Var,
    pub k_s: Var,
    pub k_w: Var,
    pub v_w: Var,
}

pub struct Graph<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    dropout: Option<ChaCha8Rng>,
    kinks: u64,
}

const FNV_PRIME: u64 = 0x100_0000_01b3;

impl<'a, T: Scalar> Graph<'a, T> {
    /// An inference graph: dropout is the identity.
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self { store, nodes: Vec::new(), params: HashMap::new(), dropout: None, kinks: 0xcbf2_9ce4_8422_2325 }
    }

    /// A training graph; dropout masks are drawn from `rng`.
    pub fn training(store: &'a ParamStore<T>, rng: ChaCha8Rng) -> Self {
        let mut g = Self::new(store);
        g.dropout = Some(rng);
        g
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    /// Returns the dropout generator so the caller can keep its stream.
    pub fn into_rng(self) -> Option<ChaCha8Rng> {
        self.dropout
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every discrete decision taken in the forward pass (ReLU signs,
    /// sparsemax supports). Two evaluations with equal signatures lie in the
    /// same differentiable piece.
    pub fn kink_signature(&self) -> u64 {
        self.kinks
    }

    fn mix_kinks(&mut self, bits: impl Iterator<Item = bool>) {
        for b in bits {
            self.kinks = (self.kinks ^ u64::from(b)).wrapping_mul(FNV_PRIME);
        }
        self.kinks = (self.kinks ^ 0xff).wrapping_mul(FNV_PRIME);
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.store.get(*id),
            (_, Some(t)) => t,
            _ => unreachable!("non-parameter node without value"),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Input, false, "input")
    }

    /// Leaf node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id), needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng, "matmul")
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip(a, b, |p, q| p + q);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip(a, b, |p, q| p - q);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng, "sub")
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip(a, b, |p, q| p * q);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng, "mul")
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(Error::shape("add_row", format!("{:?} + row {:?}", xv.shape(), bv.shape())));
        }
        let mut out = xv.clone();
        let c = xv.cols();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        self.push(out, Op::AddRow(x, bias), ng, "add_row")
    }

    /// `x · W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng, "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(T::zero()));
        let signs: Vec<bool> = self.value(a).data().iter().map(|&v| v > T::zero()).collect();
        self.mix_kinks(signs.into_iter());
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng, "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng, "sigmoid")
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_rows", "no inputs"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::shape("concat_rows", format!("{} vs {cols} columns", t.cols())));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::matrix(rows, cols, data)?, Op::ConcatRows(parts.to_vec()), ng, "concat_rows")
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_cols", "no inputs"))?;
        let rows = self.value(*first).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(&[rows, total]);
        let mut at = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::shape("concat_cols", format!("{} vs {rows} rows", t.rows())));
            }
            out.set_col_block(at, t);
            at += t.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng, "concat_cols")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start > end || end > t.rows() {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {} rows", t.rows())));
        }
        let out = t.row_block(start, end);
        let ng = self.ng(a);
        self.push(out, Op::SliceRows(a, start), ng, "slice_rows")
    }

    /// Row lookup; with a parameter table this is an embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let c = t.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= t.rows() {
                return Err(Error::TokenOutOfRange { id: i, size: t.rows() });
            }
            data.extend_from_slice(t.row(i));
        }
        let ng = self.ng(table);
        self.push(Tensor::matrix(ids.len(), c, data)?, Op::GatherRows(table, ids.to_vec()), ng, "gather_rows")
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Places row `i` of `x` at row `rows[i]` of a zero matrix with `total` rows.
    pub fn scatter_rows(&mut self, x: Var, rows: &[usize], total: usize) -> Result<Var> {
        let t = self.value(x);
        if rows.len() != t.rows() || rows.iter().any(|&r| r >= total) {
            return Err(Error::shape("scatter_rows", format!("{} rows into {total}", t.rows())));
        }
        let mut out = Tensor::zeros(&[total, t.cols()]);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        let ng = self.ng(x);
        self.push(out, Op::ScatterRows(x, rows.to_vec()), ng, "scatter_rows")
    }

    /// Mean of each row range; one output row per range.
    pub fn segment_mean(&mut self, x: Var, ranges: &[Range<usize>]) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        let mut out = Tensor::zeros(&[ranges.len(), c]);
        for (j, r) in ranges.iter().enumerate() {
            if r.is_empty() || r.end > t.rows() {
                return Err(Error::invalid("segment_mean", format!("bad range {r:?} over {} rows", t.rows())));
            }
            let inv = T::one() / T::from_usize(r.len()).unwrap();
            let o = out.row_mut(j);
            for i in r.clone() {
                for (a, &b) in o.iter_mut().zip(t.row(i)) {
                    *a += b;
                }
            }
            o.iter_mut().for_each(|a| *a *= inv);
        }
        let ng = self.ng(x);
        self.push(out, Op::SegmentMean(x, ranges.to_vec()), ng, "segment_mean")
    }

    /// Replaces entries where `mask` is true with `value`; no gradient flows there.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: T) -> Result<Var> {
        let t = self.value(a);
        if mask.len() != t.len() {
            return Err(Error::shape("masked_fill", format!("{} mask entries for {:?}", mask.len(), t.shape())));
        }
        let mut out = t.clone();
        for (o, &m) in out.data_mut().iter_mut().zip(mask) {
            if m {
                *o = value;
            }
        }
        let ng = self.ng(a);
        let op = Op::MaskedFill(a, mask.to_vec());
        // The fill value may legitimately be -inf ahead of a normalizer.
        self.nodes.push(Node { value: Some(out), op, needs_grad: ng });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Row softmax. Entries equal to `-inf` (from [`Graph::masked_fill`]) are
    /// treated as masked.
    pub fn softmax(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var> {
        let t = self.value(a);
        if t.data().iter().any(|v| v.is_nan() || *v == T::infinity()) {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let out = if t.all_finite() {
            normalize::softmax_rows(t, mask)?
        } else {
            let cols = t.cols();
            let blocked = Mask::from_fn(t.rows(), cols, |r, c| {
                t.data()[r * cols + c] == T::neg_infinity() || mask.is_some_and(|m| m.blocked(r, c))
            });
            normalize::softmax_rows(&t.map(|v| if v.is_finite() { v } else { T::zero() }), Some(&blocked))?
        };
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng, "softmax")
    }

    pub fn sparsemax(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var> {
        let res = sparsemax::sparsemax_rows(self.value(a), mask)?;
        self.mix_kinks(res.support.iter().copied());
        let ng = self.ng(a);
        self.push(res.probs, Op::Sparsemax(a), ng, "sparsemax")
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if c == 0 || t.is_empty() {
            return Err(Error::invalid("layer_norm", "zero-length feature vector"));
        }
        let (g, b) = (self.value(gain), self.value(bias));
        if g.len() != c || b.len() != c {
            return Err(Error::shape("layer_norm", format!("features {c}, gain {:?}, bias {:?}", g.shape(), b.shape())));
        }
        let (xhat, rstd) = layer_norm_core(t, eps);
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(c) {
            for ((o, &gv), &bv) in row.iter_mut().zip(g.data()).zip(b.data()) {
                *o = *o * gv + bv;
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng, "layer_norm")
    }

    /// Inverted dropout; the identity outside training graphs or at rate 0.
    pub fn dropout(&mut self, a: Var, rate: T) -> Result<Var> {
        if rate <= T::zero() {
            return Ok(a);
        }
        if rate >= T::one() {
            return Err(Error::invalid("dropout", "rate must be below 1"));
        }
        let n = self.value(a).len();
        let Some(rng) = self.dropout.as_mut() else {
            return Ok(a);
        };
        let keep = T::one() / (T::one() - rate);
        let r = rate.as_f64();
        let scales: Vec<T> = (0..n).map(|_| if rng.random::<f64>() < r { T::zero() } else { keep }).collect();
        let t = self.value(a);
        let data = t.data().iter().zip(&scales).map(|(&v, &s)| v * s).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let ng = self.ng(a);
        self.push(out, Op::Dropout(a, scales), ng, "dropout")
    }

    /// Summed label-smoothed cross-entropy over rows of `logits`.
    ///
    /// Row `i` is scored against `q = (1-eps)·onehot(targets[i]) + eps/V`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], eps: T) -> Result<Var> {
        let t = self.value(logits);
        if targets.len() != t.rows() {
            return Err(Error::shape("cross_entropy", format!("{} targets for {} rows", targets.len(), t.rows())));
        }
        let v = t.cols();
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            return Err(Error::TokenOutOfRange { id: bad, size: v });
        }
        let probs = normalize::softmax_rows(t, None)?;
        let loss = label_smoothed_loss(t, targets, eps)?;
        let ng = self.ng(logits);
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), eps, probs }, ng, "cross_entropy")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng, "sum")
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// `q` (`n×d`), `k`, `v` (`m×d`); head `h` reads column block `h`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&Mask>, normalizer: Normalizer) -> Result<Var> {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let dim = qt.cols();
        if kt.cols() != dim || vt.cols() != dim || kt.rows() != vt.rows() {
            return Err(Error::shape("attention", format!("Q {:?}, K {:?}, V {:?}", qt.shape(), kt.shape(), vt.shape())));
        }
        let dk = attention::head_dim(dim, heads, "attention")?;
        let mut out = Tensor::zeros(&[qt.rows(), dim]);
        let mut weights = Vec::with_capacity(heads);
        let mut supports = Vec::new();
        for h in 0..heads {
            let (s, e) = (h * dk, (h + 1) * dk);
            let (o, w) = attention::scaled_dot_attention(&qt.col_block(s, e), &kt.col_block(s, e), &vt.col_block(s, e), mask, normalizer)?;
            out.set_col_block(s, &o);
            if normalizer == Normalizer::Sparsemax {
                supports.extend(w.data().iter().map(|&p| p > T::zero()));
            }
            weights.push(w);
        }
        if !supports.is_empty() {
            self.mix_kinks(supports.into_iter());
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, Op::Attention { q, k, v, heads, normalizer, weights }, ng, "attention")
    }

    /// Hierarchical multi-head attention over already-projected inputs.
    /// Returns the concatenated head outputs (before `W^O`).
    pub fn hier_attention(
        &mut self,
        inputs: HierInputs,
        heads: usize,
        ranges: &SentenceRanges,
        sentence_mask: Option<&Mask>,
        word_normalizer: Normalizer,
    ) -> Result<Var> {
        let HierInputs { q_s, q_w, k_s, k_w, v_w } = inputs;
        let dim = self.value(q_s).cols();
        for v in [q_w, k_s, k_w, v_w] {
            if self.value(v).cols() != dim {
                return Err(Error::shape("hier_attention", "inputs must share the model dimension"));
            }
        }
        let dk = attention::head_dim(dim, heads, "hier_attention")?;
        let n = self.value(q_s).rows();
        let mut out = Tensor::zeros(&[n, dim]);
        let mut weights = Vec::with_capacity(heads);
        let mut supports = Vec::new();
        for h in 0..heads {
            let (s, e) = (h * dk, (h + 1) * dk);
            let (o, w) = attention::h_attention(
                &self.value(q_s).col_block(s, e),
                &self.value(q_w).col_block(s, e),
                &self.value(k_s).col_block(s, e),
                &self.value(k_w).col_block(s, e),
                &self.value(v_w).col_block(s, e),
                ranges,
                sentence_mask,
                word_normalizer,
            )?;
            out.set_col_block(s, &o);
            supports.extend(w.sentence.data().iter().map(|&p| p > T::zero()));
            if word_normalizer == Normalizer::Sparsemax {
                for blk in &w.word {
                    supports.extend(blk.data().iter().map(|&p| p > T::zero()));
                }
            }
            weights.push(w);
        }
        self.mix_kinks(supports.into_iter());
        let ng = [q_s, q_w, k_s, k_w, v_w].iter().any(|&v| self.ng(v));
        let op = Op::HierAttention { inputs: [q_s, q_w, k_s, k_w, v_w], heads, ranges: ranges.clone(), normalizer: word_normalizer, weights };
        self.push(out, op, ng, "hier_attention")
    }

    /// Per-head weights recorded by a [`Graph::hier_attention`] node.
    pub fn hier_weights(&self, v: Var) -> Option<&[AttentionWeights<T>]> {
        match &self.nodes[v.0].op {
            Op::HierAttention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Per-head weights recorded by a [`Graph::attention`] node.
    pub fn attention_weights(&self, v: Var) -> Option<&[Tensor<T>]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Accumulates `d root / d param` into `grads` for every parameter reachable from `root`.
    pub fn backward(&self, root: Var, grads: &mut Grads<T>) -> Result<()> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        if grads.len() != self.store.len() {
            return Err(Error::shape("backward", "gradient buffer does not match parameter store"));
        }
        let mut adj: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(Tensor::full(rv.shape(), T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, g, &mut adj, grads)?;
        }
        Ok(())
    }

    fn acc(&self, adj: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn acc_with(&self, adj: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut Tensor<T>)) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut adj[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().unwrap());
    }

    fn backprop_node(&self, node: &Node<T>, g: Tensor<T>, adj: &mut [Option<Tensor<T>>], grads: &mut Grads<T>) -> Result<()> {
        match &node.op {
            Op::Input => {}
            Op::Param(id) => grads.grads[id.0].add_assign(&g),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                self.acc_with(adj, *a, |t| gemm_into(t.data_mut(), m, n, k, g.data(), false, bv.data(), true, true));
                self.acc_with(adj, *b, |t| gemm_into(t.data_mut(), k, m, n, av.data(), true, g.data(), false, true));
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    self.acc(adj, *a, g.clone());
                }
                self.acc(adj, *b, g);
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    self.acc(adj, *a, g.clone());
                }
                self.acc(adj, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc_with(adj, *a, |t| zip_acc(t, &g, bv, |x, y| x * y));
                self.acc_with(adj, *b, |t| zip_acc(t, &g, av, |x, y| x * y));
            }
            Op::AddRow(x, b) => {
                let c = g.cols();
                self.acc_with(adj, *b, |t| {
                    for row in g.data().chunks(c) {
                        for (o, &v) in t.data_mut().iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                });
                self.acc(adj, *x, g);
            }
            Op::Scale(a, c) => self.acc(adj, *a, g.map(|v| v * *c)),
            Op::Relu(a) => {
                let x = self.value(*a);
                self.acc_with(adj, *a, |t| zip_acc(t, &g, x, |gv, xv| if xv > T::zero() { gv } else { T::zero() }));
            }
            Op::Sigmoid(a) => {
                let y = node.value.as_ref().unwrap();
                self.acc_with(adj, *a, |t| zip_acc(t, &g, y, |gv, s| gv * s * (T::one() - s)));
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.ng(p) {
                        self.acc(adj, p, g.row_block(at, at + r));
                    }
                    at += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.ng(p) {
                        self.acc(adj, p, g.col_block(at, at + c));
                    }
                    at += c;
                }
            }
            Op::SliceRows(a, start) => {
                let start = *start;
                self.acc_with(adj, *a, |t| {
                    let c = t.cols();
                    for (o, &v) in t.data_mut()[start * c..].iter_mut().zip(g.data()) {
                        *o += v;
                    }
                });
            }
            Op::GatherRows(table, ids) => {
                self.acc_with(adj, *table, |t| {
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, &v) in t.row_mut(id).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::ScatterRows(x, rows) => {
                self.acc_with(adj, *x, |t| {
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, &v) in t.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::SegmentMean(x, ranges) => {
                self.acc_with(adj, *x, |t| {
                    for (j, r) in ranges.iter().enumerate() {
                        let inv = T::one() / T::from_usize(r.len()).unwrap();
                        for i in r.clone() {
                            for (o, &v) in t.row_mut(i).iter_mut().zip(g.row(j)) {
                                *o += v * inv;
                            }
                        }
                    }
                });
            }
            Op::MaskedFill(a, mask) => {
                let data = g.data().iter().zip(mask).map(|(&v, &m)| if m { T::zero() } else { v }).collect();
                self.acc(adj, *a, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::Softmax(a) | Op::Sparsemax(a) => {
                let norm = if matches!(node.op, Op::Softmax(_)) { Normalizer::Softmax } else { Normalizer::Sparsemax };
                let y = node.value.as_ref().unwrap();
                let dx = normalize::normalize_backward(y, &g, norm)?;
                self.acc(adj, *a, dx);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = g.cols();
                let gv = self.value(*gain);
                self.acc_with(adj, *gain, |t| {
                    for (grow, hrow) in g.data().chunks(c).zip(xhat.data().chunks(c)) {
                        for ((o, &a), &b) in t.data_mut().iter_mut().zip(grow).zip(hrow) {
                            *o += a * b;
                        }
                    }
                });
                self.acc_with(adj, *bias, |t| {
                    for grow in g.data().chunks(c) {
                        for (o, &a) in t.data_mut().iter_mut().zip(grow) {
                            *o += a;
                        }
                    }
                });
                self.acc_with(adj, *x, |t| {
                    let inv_c = T::one() / T::from_usize(c).unwrap();
                    let mut dxhat = vec![T::zero(); c];
                    for (r, ((grow, hrow), orow)) in g.data().chunks(c).zip(xhat.data().chunks(c)).zip(t.data_mut().chunks_mut(c)).enumerate() {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for i in 0..c {
                            dxhat[i] = grow[i] * gv.data()[i];
                            mean_d += dxhat[i];
                            mean_dh += dxhat[i] * hrow[i];
                        }
                        mean_d *= inv_c;
                        mean_dh *= inv_c;
                        for i in 0..c {
                            orow[i] += rstd[r] * (dxhat[i] - mean_d - hrow[i] * mean_dh);
                        }
                    }
                });
            }
            Op::Dropout(a, scales) => {
                let data = g.data().iter().zip(scales).map(|(&v, &s)| v * s).collect();
                self.acc(adj, *a, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::CrossEntropy { logits, targets, eps, probs } => {
                let up = g.item();
                let v = probs.cols();
                let off = *eps / T::from_usize(v).unwrap();
                let on = T::one() - *eps + off;
                let mut d = probs.clone();
                for (i, &y) in targets.iter().enumerate() {
                    let row = d.row_mut(i);
                    for (c, p) in row.iter_mut().enumerate() {
                        *p = (*p - if c == y { on } else { off }) * up;
                    }
                }
                self.acc(adj, *logits, d);
            }
            Op::Sum(a) => {
                let up = g.item();
                let shape = self.value(*a).shape().to_vec();
                self.acc(adj, *a, Tensor::full(&shape, up));
            }
            Op::Attention { q, k, v, heads, normalizer, weights } => {
                let (qt, kt, vt) = (self.value(*q), self.value(*k), self.value(*v));
                let dk = qt.cols() / heads;
                let mut dq = Tensor::zeros(qt.shape());
                let mut dkk = Tensor::zeros(kt.shape());
                let mut dv = Tensor::zeros(vt.shape());
                for (h, w) in weights.iter().enumerate() {
                    let (s, e) = (h * dk, (h + 1) * dk);
                    let gr = attention::scaled_dot_attention_backward(
                        &qt.col_block(s, e),
                        &kt.col_block(s, e),
                        &vt.col_block(s, e),
                        w,
                        &g.col_block(s, e),
                        *normalizer,
                    )?;
                    dq.set_col_block(s, &gr.dq);
                    dkk.set_col_block(s, &gr.dk);
                    dv.set_col_block(s, &gr.dv);
                }
                self.acc(adj, *q, dq);
                self.acc(adj, *k, dkk);
                self.acc(adj, *v, dv);
            }
            Op::HierAttention { inputs, heads, ranges, normalizer, weights } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let dk = vals[0].cols() / heads;
                let mut d: Vec<Tensor<T>> = vals.iter().map(|t| Tensor::zeros(t.shape())).collect();
                for (h, w) in weights.iter().enumerate() {
                    let (s, e) = (h * dk, (h + 1) * dk);
                    let gr = attention::h_attention_backward(
                        &vals[0].col_block(s, e),
                        &vals[1].col_block(s, e),
                        &vals[2].col_block(s, e),
                        &vals[3].col_block(s, e),
                        &vals[4].col_block(s, e),
                        ranges,
                        w,
                        &g.col_block(s, e),
                        *normalizer,
                    )?;
                    d[0].set_col_block(s, &gr.dq_s);
                    d[1].set_col_block(s, &gr.dq_w);
                    d[2].set_col_block(s, &gr.dk_s);
                    d[3].set_col_block(s, &gr.dk_w);
                    d[4].set_col_block(s, &gr.dv_w);
                }
                for (&v, dv) in inputs.iter().zip(d) {
                    self.acc(adj, v, dv);
                }
            }
        }
        Ok(())
    }
}

fn zip_acc<T: Scalar>(target: &mut Tensor<T>, g: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) {
    for ((o, &a), &b) in target.data_mut().iter_mut().zip(g.data()).zip(other.data()) {
        *o += f(a, b);
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Normalized rows `(x - mean)/sqrt(var + eps)` and the per-row `1/sqrt(var + eps)`.
pub(crate) fn layer_norm_core<T: Scalar>(x: &Tensor<T>, eps: T) -> (Tensor<T>, Vec<T>) {
    let c = x.cols();
    let inv_c = T::one() / T::from_usize(c).unwrap();
    let mut out = x.clone();
    let mut rstds = Vec::with_capacity(x.rows());
    for row in out.data_mut().chunks_mut(c) {
        let mean = row.iter().copied().sum::<T>() * inv_c;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
        let rstd = T::one() / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * rstd;
        }
        rstds.push(rstd);
    }
    (out, rstds)
}

/// `-Σ_v q_v log p_v` summed over rows, `q = (1-eps)·onehot + eps/V`.
pub(crate) fn label_smoothed_loss<T: Scalar>(logits: &Tensor<T>, targets: &[usize], eps: T) -> Result<T> {
    let v = logits.cols();
    let off = eps / T::from_usize(v).unwrap();
    let mut total = T::zero();
    for (i, &y) in targets.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
        let mut loss = T::zero();
        for (c, &z) in row.iter().enumerate() {
            let q = if c == y { T::one() - eps + off } else { off };
            if q != T::zero() {
                loss -= q * (z - lse);
            }
        }
        total += loss;
    }
    if !total.is_finite() {
        return Err(Error::NonFinite { op: "cross_entropy" });
    }
    Ok(total)
}

/// Per-row log-softmax.
pub fn log_softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(logits.cols()) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
        row.iter_mut().for_each(|z| *z -= lse);
    }
    out
}
