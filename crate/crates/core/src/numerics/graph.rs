//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation as a node holding its forward value
//! and the inputs it was produced from. [`Graph::backward`] walks the tape in
//! reverse and returns a [`Gradients`] table. Leaves created with
//! [`Graph::constant`] never receive gradients, and nodes that depend only on
//! constants are skipped during the backward sweep.
//!
//! Shape mismatches inside graph operations are programming errors and panic
//! with the offending shapes; the fallible entry points are the raw kernels
//! in [`super::kernels`].

use super::kernels::{matmul, matmul_nt, matmul_tn, softmax_slice};
use super::{NumericsError, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Silu(Var),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Abs(Var),
    ClampMin(Var, T),
    SteRound(Var),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    TileCols { x: Var, times: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    RmsNorm { x: Var, scale: Var, inv: Vec<T> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor<T>, inv: Vec<T> },
    SoftmaxRows(Var),
    Attention(Box<AttentionSaved<T>>),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Tensor<T>, count: usize },
    GroupL2 { x: Var, groups: Vec<Vec<usize>>, norms: Vec<T> },
}

#[derive(Debug)]
struct AttentionSaved<T> {
    q: Var,
    k: Var,
    v: Var,
    shape: AttentionShape,
    scale: T,
    probs: Vec<Tensor<T>>,
}

/// Layout of a fused multi-head attention call.
///
/// Rows of `q`, `k`, `v` hold `rows / seq_len` independent sequences stacked
/// back to back. Head `h` owns columns `[h·qk_dim, (h+1)·qk_dim)` of `q`/`k`
/// and `[h·v_dim, (h+1)·v_dim)` of `v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub heads: usize,
    pub qk_dim: usize,
    pub v_dim: usize,
    pub seq_len: usize,
    pub causal: bool,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The recording tape. Values are immutable once produced.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` if `v` does not influence the root or was
    /// created as a constant.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, with zeros standing in for an absent entry.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros_like(like))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b)).unwrap_or_else(|e| panic!("{e}"));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).sub(self.value(b));
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// `x [p×q] + row [1×q]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        check_row(xv, rv, "add_row");
        let c = xv.cols();
        let mut out = xv.clone();
        if c > 0 {
            for chunk in out.data_mut().chunks_mut(c) {
                for (o, &r) in chunk.iter_mut().zip(rv.data()) {
                    *o = *o + r;
                }
            }
        }
        self.push(out, Op::AddRow(x, row), &[x, row])
    }

    /// `x [p×q] ⊙ row [1×q]` broadcast over rows; equivalently `x · diag(row)`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        check_row(xv, rv, "mul_row");
        let out = xv.mul_cols(rv.data());
        self.push(out, Op::MulRow(x, row), &[x, row])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).scale(s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::scalar(xv.sum() / T::from_count(xv.len().max(1)));
        self.push(out, Op::Mean(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.ln());
        self.push(out, Op::Ln(x), &[x])
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        self.push(out, Op::Abs(x), &[x])
    }

    /// `max(x, lo)`; gradient passes where `x >= lo`.
    pub fn clamp_min(&mut self, x: Var, lo: T) -> Var {
        let out = self.value(x).map(|v| v.max(lo));
        self.push(out, Op::ClampMin(x, lo), &[x])
    }

    /// Hard threshold at 0.5 in the forward pass, identity in the backward
    /// pass (straight-through estimator).
    pub fn ste_round(&mut self, x: Var) -> Var {
        let out = self.value(x).map(round_half_up);
        self.push(out, Op::SteRound(x), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols(), "slice_cols out of range");
        let idx: Vec<usize> = (start..start + len).collect();
        let out = xv.select_cols(&idx);
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.rows(), "slice_rows out of range");
        let c = xv.cols();
        let out = Tensor::matrix(len, c, xv.data()[start * c..(start + len) * c].to_vec());
        self.push(out, Op::SliceRows { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
                data.extend_from_slice(pv.row(i));
            }
        }
        self.push(Tensor::matrix(rows, total, data), Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        self.push(Tensor::matrix(rows, cols, data), Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Repeats the columns of `x [r×k]` `times` times: `[x, x, …]`.
    pub fn tile_cols(&mut self, x: Var, times: usize) -> Var {
        let xv = self.value(x);
        let (r, k) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(r * k * times);
        for i in 0..r {
            for _ in 0..times {
                data.extend_from_slice(xv.row(i));
            }
        }
        self.push(Tensor::matrix(r, k * times, data), Op::TileCols { x, times }, &[x])
    }

    /// Row lookup `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        for &i in ids {
            assert!(i < tv.rows(), "gather_rows index {i} out of range {}", tv.rows());
        }
        let out = tv.select_rows(ids);
        self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Row-wise RMS normalization with a learned `1×q` scale.
    pub fn rms_norm(&mut self, x: Var, scale: Var, eps: T) -> Var {
        let (xv, sv) = (self.value(x), self.value(scale));
        check_row(xv, sv, "rms_norm");
        let (r, c) = (xv.rows(), xv.cols());
        let n = T::from_count(c.max(1));
        let mut out = xv.clone();
        let mut inv = Vec::with_capacity(r);
        for i in 0..r {
            let row = &mut out.data_mut()[i * c..(i + 1) * c];
            let ms = T::lit(row.iter().fold(0.0, |a, &v| a + v.as_f64() * v.as_f64())) / n;
            let k = T::one() / (ms + eps).sqrt();
            for (o, &s) in row.iter_mut().zip(sv.data()) {
                *o = *o * k * s;
            }
            inv.push(k);
        }
        self.push(out, Op::RmsNorm { x, scale, inv }, &[x, scale])
    }

    /// Row-wise layer normalization with `1×q` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Var {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        check_row(xv, gv, "layer_norm gain");
        check_row(xv, bv, "layer_norm bias");
        let (r, c) = (xv.rows(), xv.cols());
        let n = T::from_count(c.max(1));
        let mut xhat = xv.clone();
        let mut inv = Vec::with_capacity(r);
        for i in 0..r {
            let row = &mut xhat.data_mut()[i * c..(i + 1) * c];
            let mu = T::lit(row.iter().fold(0.0, |a, &v| a + v.as_f64())) / n;
            let var = T::lit(row.iter().fold(0.0, |a, &v| a + ((v - mu) * (v - mu)).as_f64())) / n;
            let k = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mu) * k;
            }
            inv.push(k);
        }
        let mut out = xhat.clone();
        if c > 0 {
            for row in out.data_mut().chunks_mut(c) {
                for ((o, &g), &b) in row.iter_mut().zip(gv.data()).zip(bv.data()) {
                    *o = *o * g + b;
                }
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv,
            },
            &[x, gain, bias],
        )
    }

    /// Row-wise softmax (no masking); see [`super::kernels::softmax_rows`]
    /// for the masked kernel.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = super::kernels::softmax_rows(self.value(x), None).expect("unmasked softmax");
        self.push(out, Op::SoftmaxRows(x), &[x])
    }

    /// Fused multi-head scaled dot-product attention.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttentionShape, scale: T) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let AttentionShape {
            heads,
            qk_dim,
            v_dim,
            seq_len,
            causal,
        } = shape;
        let rows = qv.rows();
        assert!(seq_len > 0 && rows % seq_len == 0, "attention rows not a multiple of seq_len");
        assert_eq!(qv.cols(), heads * qk_dim, "attention q width");
        assert_eq!(kv.shape(), qv.shape(), "attention k shape");
        assert_eq!(vv.rows(), rows, "attention v rows");
        assert_eq!(vv.cols(), heads * v_dim, "attention v width");
        let (qc, vc) = (qv.cols(), vv.cols());
        let mut out = Tensor::zeros(rows, vc);
        let mut probs = Vec::with_capacity(rows / seq_len * heads);
        for b in 0..rows / seq_len {
            let base = b * seq_len;
            for h in 0..heads {
                let mut p = Tensor::zeros(seq_len, seq_len);
                for i in 0..seq_len {
                    let qi = &qv.data()[(base + i) * qc + h * qk_dim..][..qk_dim];
                    let prow = &mut p.data_mut()[i * seq_len..(i + 1) * seq_len];
                    let limit = if causal { i + 1 } else { seq_len };
                    for (j, s) in prow.iter_mut().enumerate().take(limit) {
                        let kj = &kv.data()[(base + j) * qc + h * qk_dim..][..qk_dim];
                        let dot = qi.iter().zip(kj).fold(0.0, |a, (&x, &y)| a + x.as_f64() * y.as_f64());
                        *s = T::lit(dot) * scale;
                    }
                    softmax_slice(prow, |j| j < limit);
                }
                let od = out.data_mut();
                let mut acc = vec![0.0f64; v_dim];
                for i in 0..seq_len {
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    for j in 0..seq_len {
                        let pij = p.get(i, j);
                        if pij == T::zero() {
                            continue;
                        }
                        let vj = &vv.data()[(base + j) * vc + h * v_dim..][..v_dim];
                        for (a, &x) in acc.iter_mut().zip(vj) {
                            *a += pij.as_f64() * x.as_f64();
                        }
                    }
                    let orow = &mut od[(base + i) * vc + h * v_dim..][..v_dim];
                    for (o, &a) in orow.iter_mut().zip(&acc) {
                        *o = T::lit(a);
                    }
                }
                probs.push(p);
            }
        }
        let saved = AttentionSaved {
            q,
            k,
            v,
            shape,
            scale,
            probs,
        };
        self.push(out, Op::Attention(Box::new(saved)), &[q, k, v])
    }

    /// Mean cross-entropy over rows with a target; `None` rows are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        let (r, c) = (lv.rows(), lv.cols());
        assert_eq!(targets.len(), r, "cross_entropy target count");
        let mut probs = Tensor::zeros(r, c);
        let mut total = T::zero();
        let mut count = 0usize;
        for (i, target) in targets.iter().enumerate() {
            let row = lv.row(i);
            let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let z = row.iter().fold(T::zero(), |a, &v| a + (v - m).exp());
            let lse = m + z.ln();
            let prow = &mut probs.data_mut()[i * c..(i + 1) * c];
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
            if let Some(t) = *target {
                assert!(t < c, "target {t} out of range {c}");
                total = total + (lse - row[t]);
                count += 1;
            }
        }
        let out = Tensor::scalar(total / T::from_count(count.max(1)));
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        )
    }

    /// Sum over `groups` of the L2 norm of the selected (flat) entries of `x`.
    /// The gradient of an all-zero group is defined as zero.
    pub fn group_l2_sum(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let mut norms = Vec::with_capacity(groups.len());
        let mut total = T::zero();
        for g in &groups {
            let ss = g.iter().fold(T::zero(), |a, &i| a + xv.data()[i] * xv.data()[i]);
            let n = ss.sqrt();
            norms.push(n);
            total = total + n;
        }
        self.push(Tensor::scalar(total), Op::GroupL2 { x, groups, norms }, &[x])
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>, NumericsError> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::from_vec(rv.shape().to_vec(), vec![T::one()])?);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.accumulate(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let ga = matmul_nt(g, self.value(*b)).expect("matmul grad");
                    self.acc(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = matmul_tn(self.value(*a), g).expect("matmul grad");
                    self.acc(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.wants(*b) {
                    self.acc(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(x, row) => {
                self.acc(grads, *x, g.clone());
                if self.wants(*row) {
                    self.acc(grads, *row, column_sums(g));
                }
            }
            Op::MulRow(x, row) => {
                let rv = self.value(*row);
                if self.wants(*x) {
                    self.acc(grads, *x, g.mul_cols(rv.data()));
                }
                if self.wants(*row) {
                    let prod = g.zip_map(self.value(*x), |a, b| a * b);
                    self.acc(grads, *row, column_sums(&prod));
                }
            }
            Op::Scale(x, s) => self.acc(grads, *x, g.scale(*s)),
            Op::AddScalar(x) => self.acc(grads, *x, g.clone()),
            Op::Sum(x) => {
                let gv = g.item();
                let xv = self.value(*x);
                self.acc(grads, *x, xv.map(|_| gv));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let gv = g.item() / T::from_count(xv.len().max(1));
                self.acc(grads, *x, xv.map(|_| gv));
            }
            Op::Silu(x) => {
                let gx = g.zip_map(self.value(*x), |gi, v| {
                    let s = sigmoid(v);
                    gi * s * (T::one() + v * (T::one() - s))
                });
                self.acc(grads, *x, gx);
            }
            Op::Relu(x) => {
                let gx = g.zip_map(self.value(*x), |gi, v| if v > T::zero() { gi } else { T::zero() });
                self.acc(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = g.zip_map(y, |gi, s| gi * s * (T::one() - s));
                self.acc(grads, *x, gx);
            }
            Op::Ln(x) => {
                let gx = g.zip_map(self.value(*x), |gi, v| gi / v);
                self.acc(grads, *x, gx);
            }
            Op::Abs(x) => {
                let gx = g.zip_map(self.value(*x), |gi, v| {
                    if v > T::zero() {
                        gi
                    } else if v < T::zero() {
                        -gi
                    } else {
                        T::zero()
                    }
                });
                self.acc(grads, *x, gx);
            }
            Op::ClampMin(x, lo) => {
                let gx = g.zip_map(self.value(*x), |gi, v| if v >= *lo { gi } else { T::zero() });
                self.acc(grads, *x, gx);
            }
            Op::SteRound(x) => self.acc(grads, *x, g.clone()),
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (r, c, w) = (xv.rows(), xv.cols(), g.cols());
                let mut gx = Tensor::zeros(r, c);
                for i in 0..r {
                    gx.data_mut()[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                }
                self.acc(grads, *x, gx);
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut gx = Tensor::zeros(xv.rows(), c);
                gx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.acc(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let idx: Vec<usize> = (offset..offset + w).collect();
                        self.acc(grads, p, g.select_cols(&idx));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.wants(p) {
                        let part = g.data()[offset * c..(offset + h) * c].to_vec();
                        self.acc(grads, p, Tensor::matrix(h, c, part));
                    }
                    offset += h;
                }
            }
            Op::TileCols { x, times } => {
                let xv = self.value(*x);
                let (r, k) = (xv.rows(), xv.cols());
                let mut gx = Tensor::zeros(r, k);
                for i in 0..r {
                    let grow = g.row(i);
                    for t in 0..*times {
                        for j in 0..k {
                            let cur = gx.get(i, j);
                            gx.set(i, j, cur + grow[t * k + j]);
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::GatherRows { table, ids } => {
                let tv = self.value(*table);
                let c = tv.cols();
                let mut gt = Tensor::zeros(tv.rows(), c);
                for (i, &id) in ids.iter().enumerate() {
                    let dst = &mut gt.data_mut()[id * c..(id + 1) * c];
                    for (d, &s) in dst.iter_mut().zip(g.row(i)) {
                        *d = *d + s;
                    }
                }
                self.acc(grads, *table, gt);
            }
            Op::RmsNorm { x, scale, inv } => {
                let (xv, sv) = (self.value(*x), self.value(*scale));
                let (r, c) = (xv.rows(), xv.cols());
                if self.wants(*scale) {
                    let mut gs = vec![T::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            gs[j] = gs[j] + g.get(i, j) * xv.get(i, j) * inv[i];
                        }
                    }
                    self.acc(grads, *scale, Tensor::row_vector(gs));
                }
                if self.wants(*x) {
                    let n = T::from_count(c.max(1));
                    let mut gx = Tensor::zeros(r, c);
                    for i in 0..r {
                        let k = inv[i];
                        let dot = (0..c).fold(T::zero(), |a, j| {
                            a + g.get(i, j) * sv.data()[j] * xv.get(i, j)
                        });
                        for j in 0..c {
                            let aij = g.get(i, j) * sv.data()[j];
                            gx.set(i, j, k * aij - k * k * k * xv.get(i, j) * dot / n);
                        }
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv,
            } => {
                let gv = self.value(*gain);
                let (r, c) = (xhat.rows(), xhat.cols());
                if self.wants(*gain) {
                    let prod = g.zip_map(xhat, |a, b| a * b);
                    self.acc(grads, *gain, column_sums(&prod));
                }
                if self.wants(*bias) {
                    self.acc(grads, *bias, column_sums(g));
                }
                if self.wants(*x) {
                    let n = T::from_count(c.max(1));
                    let mut gx = Tensor::zeros(r, c);
                    for i in 0..r {
                        let a: Vec<T> = (0..c).map(|j| g.get(i, j) * gv.data()[j]).collect();
                        let mean_a = a.iter().fold(T::zero(), |s, &v| s + v) / n;
                        let mean_ax = (0..c).fold(T::zero(), |s, j| s + a[j] * xhat.get(i, j)) / n;
                        for j in 0..c {
                            gx.set(i, j, inv[i] * (a[j] - mean_a - xhat.get(i, j) * mean_ax));
                        }
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::SoftmaxRows(x) => {
                let c = y.cols();
                let mut gx = Tensor::zeros(y.rows(), c);
                for i in 0..y.rows() {
                    let dot = (0..c).fold(T::zero(), |a, j| a + g.get(i, j) * y.get(i, j));
                    for j in 0..c {
                        gx.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Attention(saved) => self.attention_backward(saved, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let gv = g.item() / T::from_count((*count).max(1));
                let c = probs.cols();
                let mut gl = Tensor::zeros(probs.rows(), c);
                for (i, target) in targets.iter().enumerate() {
                    let Some(t) = *target else { continue };
                    let row = &mut gl.data_mut()[i * c..(i + 1) * c];
                    for (o, &p) in row.iter_mut().zip(probs.row(i)) {
                        *o = p * gv;
                    }
                    row[t] = row[t] - gv;
                }
                self.acc(grads, *logits, gl);
            }
            Op::GroupL2 { x, groups, norms } => {
                let xv = self.value(*x);
                let gv = g.item();
                let mut gx = Tensor::zeros_like(xv);
                for (grp, &n) in groups.iter().zip(norms) {
                    if n == T::zero() {
                        continue;
                    }
                    for &i in grp {
                        let d = gx.data_mut();
                        d[i] = d[i] + gv * xv.data()[i] / n;
                    }
                }
                self.acc(grads, *x, gx);
            }
        }
    }

    fn attention_backward(
        &self,
        saved: &AttentionSaved<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let AttentionSaved {
            q,
            k,
            v,
            shape,
            scale,
            probs,
        } = saved;
        let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
        let AttentionShape {
            heads,
            qk_dim,
            v_dim,
            seq_len,
            ..
        } = *shape;
        let (rows, qc, vc) = (qv.rows(), qv.cols(), vv.cols());
        let mut gq = Tensor::zeros(rows, qc);
        let mut gk = Tensor::zeros(rows, qc);
        let mut gvv = Tensor::zeros(rows, vc);
        let mut ds = vec![T::zero(); seq_len * seq_len];
        for b in 0..rows / seq_len {
            let base = b * seq_len;
            for h in 0..heads {
                let p = &probs[b * heads + h];
                for i in 0..seq_len {
                    let gi = &g.data()[(base + i) * vc + h * v_dim..][..v_dim];
                    let mut dp_row = vec![T::zero(); seq_len];
                    for (j, dp) in dp_row.iter_mut().enumerate() {
                        let pij = p.get(i, j);
                        if pij == T::zero() {
                            continue;
                        }
                        let vj = &vv.data()[(base + j) * vc + h * v_dim..][..v_dim];
                        *dp = gi.iter().zip(vj).fold(T::zero(), |a, (&x, &y)| a + x * y);
                        let gvj = &mut gvv.data_mut()[(base + j) * vc + h * v_dim..][..v_dim];
                        for (o, &x) in gvj.iter_mut().zip(gi) {
                            *o = *o + pij * x;
                        }
                    }
                    let dot = (0..seq_len).fold(T::zero(), |a, j| a + p.get(i, j) * dp_row[j]);
                    for j in 0..seq_len {
                        ds[i * seq_len + j] = p.get(i, j) * (dp_row[j] - dot);
                    }
                }
                for i in 0..seq_len {
                    for j in 0..seq_len {
                        let d = ds[i * seq_len + j];
                        if d == T::zero() {
                            continue;
                        }
                        let d = d * *scale;
                        for c in 0..qk_dim {
                            let qi = (base + i) * qc + h * qk_dim + c;
                            let kj = (base + j) * qc + h * qk_dim + c;
                            let (qd, kd) = (qv.data()[qi], kv.data()[kj]);
                            gq.data_mut()[qi] = gq.data()[qi] + d * kd;
                            gk.data_mut()[kj] = gk.data()[kj] + d * qd;
                        }
                    }
                }
            }
        }
        self.acc(grads, *q, gq);
        self.acc(grads, *k, gk);
        self.acc(grads, *v, gvv);
    }
}

fn check_row<T: Scalar>(x: &Tensor<T>, row: &Tensor<T>, op: &str) {
    assert!(
        row.shape() == [1, x.cols()],
        "{op}: row shape {:?} incompatible with {:?}",
        row.shape(),
        x.shape()
    );
}

fn column_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let c = g.cols();
    let mut out = vec![T::zero(); c];
    for i in 0..g.rows() {
        for (o, &v) in out.iter_mut().zip(g.row(i)) {
            *o = *o + v;
        }
    }
    Tensor::row_vector(out)
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// `1` if `v >= 0.5`, else `0`.
pub fn round_half_up<T: Scalar>(v: T) -> T {
    if v >= T::lit(0.5) {
        T::one()
    } else {
        T::zero()
    }
}
