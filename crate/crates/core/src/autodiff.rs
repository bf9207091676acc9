//! Tape-based reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] and never copied; [`Tape::backward`]
//! walks the record in reverse and returns the gradient of a scalar node
//! with respect to every trainable parameter that influenced it.

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, shape_err, Error, Result};
use crate::kernels::{self, axpy, dot, gelu, gelu_grad, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Sparse row-combination plan: output row `i` is
/// `Σ weight · input[src]` over `entries[offsets[i]..offsets[i + 1]]`.
#[derive(Clone, Debug, Default)]
pub struct RowPlan<T> {
    offsets: Vec<usize>,
    entries: Vec<(usize, T)>,
}

impl<T: Real> RowPlan<T> {
    pub fn new() -> Self {
        Self {
            offsets: vec![0],
            entries: Vec::new(),
        }
    }

    /// Appends an output row built from `(source row, weight)` terms.
    pub fn push_row(&mut self, terms: impl IntoIterator<Item = (usize, T)>) {
        self.entries.extend(terms);
        self.offsets.push(self.entries.len());
    }

    /// Plan that copies the listed source rows.
    pub fn gather(rows: impl IntoIterator<Item = usize>) -> Self {
        let mut p = Self::new();
        for r in rows {
            p.push_row([(r, T::one())]);
        }
        p
    }

    pub fn out_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    fn row(&self, i: usize) -> &[(usize, T)] {
        &self.entries[self.offsets[i]..self.offsets[i + 1]]
    }
}

enum Op<T> {
    Input,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    AddRows { x: Var, rows: Var },
    Scale { x: Var, s: T },
    AddScalar { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Relu(Var),
    Attention { qkv: Var, heads: usize, seq_len: usize, probs: Vec<T>, key_mask: Option<Vec<bool>> },
    Combine { x: Var, plan: RowPlan<T> },
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    L2Normalize { x: Var, norms: Vec<T> },
    PairDots { a: Var, b: Var, pairs: Vec<(usize, usize)> },
    RowSqSum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

struct Node<'p, T: Real> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    grad: bool,
}

/// Head-averaged attention probabilities of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix<T> {
    pub len: usize,
    pub data: Vec<T>,
}

impl<T: Real> AttentionMatrix<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.len..(i + 1) * self.len]
    }
}

pub struct Tape<'p, T: Real> {
    store: Option<&'p ParamStore<T>>,
    trainable: Vec<bool>,
    nodes: Vec<Node<'p, T>>,
}

impl<'p, T: Real> Default for Tape<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Tape<'p, T> {
    /// Tape without parameters; inputs only.
    pub fn new() -> Self {
        Self {
            store: None,
            trainable: Vec::new(),
            nodes: Vec::new(),
        }
    }

    /// Tape over `store` with every parameter trainable.
    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            trainable: vec![true; store.len()],
            nodes: Vec::new(),
        }
    }

    /// Tape over `store` where only parameters with `mask[id] == true` receive gradients.
    pub fn with_trainable(store: &'p ParamStore<T>, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), store.len());
        Self {
            store: Some(store),
            trainable: mask,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Input that receives a gradient (used by gradient checks on inputs).
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.store.expect("tape has no parameter store");
        let grad = self.trainable[id.0];
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Param(id),
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Current value of a parameter without recording a node.
    pub fn param_tensor(&self, id: ParamId) -> &'p Tensor<T> {
        self.store.expect("tape has no parameter store").get(id)
    }

    /// `x · w + b` with `x[m×k]`, `w[k×n]`, `b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
        if wv.rows() != k {
            return Err(shape_err("linear", &[k, n], wv.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != n {
                return Err(shape_err("linear bias", &[n], bv.shape()));
            }
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv.data());
            }
        }
        matmul_acc(xv.data(), wv.data(), &mut out, m, k, n);
        let grad = self.g(x) || self.g(w) || b.is_some_and(|b| self.g(b));
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::Linear { x, w, b }, grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(op, av.shape(), bv.shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x + *y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let grad = self.g(a) || self.g(b);
        Ok(self.push(t, Op::Add(a, b), grad))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x - *y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let grad = self.g(a) || self.g(b);
        Ok(self.push(t, Op::Sub(a, b), grad))
    }

    /// Adds the `period × d` table `rows` to each consecutive block of `x`.
    pub fn add_rows(&mut self, x: Var, rows: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(rows));
        let (period, d) = (rv.rows(), rv.cols());
        if xv.cols() != d || period == 0 || xv.rows() % period != 0 {
            return Err(shape_err("add_rows", &[period, d], xv.shape()));
        }
        let mut out = xv.data().to_vec();
        for (i, row) in out.chunks_mut(d).enumerate() {
            let r = rv.row(i % period);
            for (o, v) in row.iter_mut().zip(r) {
                *o += *v;
            }
        }
        let t = Tensor::matrix(xv.rows(), d, out)?;
        let grad = self.g(x) || self.g(rows);
        Ok(self.push(t, Op::AddRows { x, rows }, grad))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| *v * s).collect())
            .expect("same length");
        let grad = self.g(x);
        self.push(t, Op::Scale { x, s }, grad)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| *v + s).collect())
            .expect("same length");
        let grad = self.g(x);
        self.push(t, Op::AddScalar { x }, grad)
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let eps = T::of(1e-5);
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (m, d) = (xv.rows(), xv.cols());
        if gv.len() != d || bv.len() != d {
            return Err(shape_err("layer_norm", &[d], gv.shape()));
        }
        let dn = T::of(d as f64);
        let mut out = vec![T::zero(); m * d];
        let mut mean = Vec::with_capacity(m);
        let mut rstd = Vec::with_capacity(m);
        for i in 0..m {
            let r = xv.row(i);
            let mu = r.iter().copied().sum::<T>() / dn;
            let var = r.iter().map(|v| (*v - mu) * (*v - mu)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            let o = &mut out[i * d..(i + 1) * d];
            for j in 0..d {
                o[j] = (r[j] - mu) * rs * gv.data()[j] + bv.data()[j];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let t = Tensor::matrix(m, d, out)?;
        let grad = self.g(x) || self.g(gamma) || self.g(beta);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, mean, rstd }, grad))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| gelu(*v)).collect())
            .expect("same length");
        let grad = self.g(x);
        self.push(t, Op::Gelu(x), grad)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|v| v.max(T::zero())).collect(),
        )
        .expect("same length");
        let grad = self.g(x);
        self.push(t, Op::Relu(x), grad)
    }

    /// Multi-head scaled dot-product attention over independent sequences.
    ///
    /// `qkv` holds `B·seq_len` rows laid out as `[q | k | v]`, each of width
    /// `d`. Keys with `key_mask[row] == false` get zero probability. The
    /// scale is `1/√(d/heads)`.
    pub fn attention(
        &mut self,
        qkv: Var,
        heads: usize,
        seq_len: usize,
        key_mask: Option<Vec<bool>>,
    ) -> Result<Var> {
        let qv = self.value(qkv);
        let (rows, w3) = (qv.rows(), qv.cols());
        if w3 % 3 != 0 || heads == 0 || (w3 / 3) % heads != 0 {
            return Err(invalid(alloc::format!(
                "attention width {w3} not divisible into 3 × {heads} heads"
            )));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(shape_err("attention", &[seq_len], &[rows]));
        }
        if let Some(m) = &key_mask {
            if m.len() != rows {
                return Err(shape_err("attention mask", &[rows], &[m.len()]));
            }
        }
        let d = w3 / 3;
        let dh = d / heads;
        let batch = rows / seq_len;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let t = seq_len;
        let data = qv.data();
        let mut out = vec![T::zero(); rows * d];
        let mut probs = vec![T::zero(); batch * heads * t * t];
        let mut scores = vec![T::zero(); t];
        for b in 0..batch {
            let base = b * t;
            let valid = |s: usize| key_mask.as_ref().is_none_or(|m| m[base + s]);
            if !(0..t).any(valid) {
                return Err(Error::AllMasked);
            }
            for h in 0..heads {
                let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                for qi in 0..t {
                    let q = &data[(base + qi) * w3 + qo..(base + qi) * w3 + qo + dh];
                    let mut max = T::neg_infinity();
                    for s in 0..t {
                        if !valid(s) {
                            continue;
                        }
                        let k = &data[(base + s) * w3 + ko..(base + s) * w3 + ko + dh];
                        let v = dot(q, k) * scale;
                        scores[s] = v;
                        max = max.max(v);
                    }
                    let mut sum = T::zero();
                    for (s, sc) in scores.iter_mut().enumerate().take(t) {
                        if !valid(s) {
                            continue;
                        }
                        *sc = (*sc - max).exp();
                        sum += *sc;
                    }
                    let prow = &mut probs[((b * heads + h) * t + qi) * t..][..t];
                    let orow = &mut out[(base + qi) * d + h * dh..(base + qi) * d + (h + 1) * dh];
                    for s in 0..t {
                        if !valid(s) {
                            continue;
                        }
                        let p = scores[s] / sum;
                        prow[s] = p;
                        let v = &data[(base + s) * w3 + vo..(base + s) * w3 + vo + dh];
                        axpy(p, v, orow);
                    }
                }
            }
        }
        let tensor = Tensor::matrix(rows, d, out)?;
        let grad = self.g(qkv);
        Ok(self.push(
            tensor,
            Op::Attention {
                qkv,
                heads,
                seq_len,
                probs,
                key_mask,
            },
            grad,
        ))
    }

    /// Head-averaged probabilities of sequence `b` for an attention node.
    pub fn attention_matrix(&self, node: Var, b: usize) -> Result<AttentionMatrix<T>> {
        match &self.nodes[node.0].op {
            Op::Attention {
                heads,
                seq_len,
                probs,
                ..
            } => {
                let t = *seq_len;
                let batch = probs.len() / (heads * t * t);
                if b >= batch {
                    return Err(invalid(alloc::format!("sequence {b} out of {batch}")));
                }
                let mut data = vec![T::zero(); t * t];
                for h in 0..*heads {
                    let p = &probs[(b * heads + h) * t * t..][..t * t];
                    for (o, v) in data.iter_mut().zip(p) {
                        *o += *v;
                    }
                }
                let inv = T::one() / T::of(*heads as f64);
                for v in data.iter_mut() {
                    *v *= inv;
                }
                Ok(AttentionMatrix { len: t, data })
            }
            _ => Err(invalid("node is not an attention node")),
        }
    }

    /// Number of sequences in an attention node.
    pub fn attention_batch(&self, node: Var) -> usize {
        match &self.nodes[node.0].op {
            Op::Attention {
                heads,
                seq_len,
                probs,
                ..
            } => probs.len() / (heads * seq_len * seq_len),
            _ => 0,
        }
    }

    pub fn combine(&mut self, x: Var, plan: RowPlan<T>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let n = plan.out_rows();
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            let o = &mut out[i * c..(i + 1) * c];
            for &(src, w) in plan.row(i) {
                if src >= r {
                    return Err(invalid(alloc::format!("row {src} out of {r}")));
                }
                if w == T::one() {
                    for (ov, xv) in o.iter_mut().zip(xv.row(src)) {
                        *ov += *xv;
                    }
                } else {
                    axpy(w, xv.row(src), o);
                }
            }
        }
        let t = Tensor::matrix(n, c, out)?;
        let grad = self.g(x);
        Ok(self.push(t, Op::Combine { x, plan }, grad))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.combine(x, RowPlan::gather(rows.iter().copied()))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(shape_err("concat_rows", &[av.cols()], &[bv.cols()]));
        }
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let t = Tensor::matrix(av.rows() + bv.rows(), av.cols(), data)?;
        let grad = self.g(a) || self.g(b);
        Ok(self.push(t, Op::ConcatRows(a, b), grad))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(shape_err("concat_cols", &[av.rows()], &[bv.rows()]));
        }
        let (ca, cb) = (av.cols(), bv.cols());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for i in 0..av.rows() {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let t = Tensor::matrix(av.rows(), ca + cb, data)?;
        let grad = self.g(a) || self.g(b);
        Ok(self.push(t, Op::ConcatCols(a, b), grad))
    }

    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, c) = (xv.rows(), xv.cols());
        let floor = T::of(1e-12);
        let mut out = xv.data().to_vec();
        let mut norms = Vec::with_capacity(m);
        for row in out.chunks_mut(c) {
            let n = kernels::l2_norm(row).max(floor);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let t = Tensor::matrix(m, c, out)?;
        let grad = self.g(x);
        Ok(self.push(t, Op::L2Normalize { x, norms }, grad))
    }

    /// Column of dot products `a[i] · b[j]` for each `(i, j)` in `pairs`.
    pub fn pair_dots(&mut self, a: Var, b: Var, pairs: Vec<(usize, usize)>) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(shape_err("pair_dots", &[av.cols()], &[bv.cols()]));
        }
        let mut out = Vec::with_capacity(pairs.len());
        for &(i, j) in &pairs {
            if i >= av.rows() || j >= bv.rows() {
                return Err(invalid("pair index out of range"));
            }
            out.push(dot(av.row(i), bv.row(j)));
        }
        let t = Tensor::matrix(pairs.len(), 1, out)?;
        let grad = self.g(a) || self.g(b);
        Ok(self.push(t, Op::PairDots { a, b, pairs }, grad))
    }

    /// Per-row sum of squares, `m × 1`.
    pub fn row_sq_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out: Vec<T> = (0..xv.rows()).map(|i| dot(xv.row(i), xv.row(i))).collect();
        let t = Tensor::matrix(out.len(), 1, out).expect("column");
        let grad = self.g(x);
        self.push(t, Op::RowSqSum(x), grad)
    }

    /// Mean of every element, `1 × 1`.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = T::of(xv.len().max(1) as f64);
        let s = xv.data().iter().copied().sum::<T>() / n;
        let grad = self.g(x);
        self.push(Tensor::scalar(s), Op::Mean(x), grad)
    }

    /// Mean softmax cross-entropy of `logits[B×C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, c) = (lv.rows(), lv.cols());
        if labels.len() != b {
            return Err(shape_err("cross_entropy", &[b], &[labels.len()]));
        }
        let mut probs = lv.data().to_vec();
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(invalid("label out of range"));
            }
            let row = lv.row(i);
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = max + row.iter().map(|v| (*v - max).exp()).sum::<T>().ln();
            total += lse - row[y];
            kernels::softmax_in_place(&mut probs[i * c..(i + 1) * c]);
        }
        let loss = total / T::of(b.max(1) as f64);
        let grad = self.g(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            grad,
        ))
    }

    /// Gradients of the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", &[1], self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.grad {
                continue;
            }
            self.backprop_node(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.nodes[v.0].grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop_node(&self, node: &Node<'p, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
                if let Some(gx) = self.acc(grads, *x) {
                    matmul_nt_acc(g, wv.data(), gx, m, n, k);
                }
                if let Some(gw) = self.acc(grads, *w) {
                    matmul_tn_acc(xv.data(), g, gw, m, k, n);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.acc(grads, *b) {
                        for row in g.chunks(n) {
                            for (o, v) in gb.iter_mut().zip(row) {
                                *o += *v;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(ga) = self.acc(grads, *v) {
                        for (o, x) in ga.iter_mut().zip(g) {
                            *o += *x;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (o, x) in ga.iter_mut().zip(g) {
                        *o += *x;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (o, x) in gb.iter_mut().zip(g) {
                        *o -= *x;
                    }
                }
            }
            Op::AddRows { x, rows } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, v) in gx.iter_mut().zip(g) {
                        *o += *v;
                    }
                }
                let rv = self.value(*rows);
                let (period, d) = (rv.rows(), rv.cols());
                if let Some(gr) = self.acc(grads, *rows) {
                    for (i, row) in g.chunks(d).enumerate() {
                        let p = i % period;
                        for (o, v) in gr[p * d..(p + 1) * d].iter_mut().zip(row) {
                            *o += *v;
                        }
                    }
                }
            }
            Op::Scale { x, s } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, v) in gx.iter_mut().zip(g) {
                        *o += *v * *s;
                    }
                }
            }
            Op::AddScalar { x } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, v) in gx.iter_mut().zip(g) {
                        *o += *v;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let d = xv.cols();
                let dn = T::of(d as f64);
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (i, grow) in g.chunks(d).enumerate() {
                        let r = xv.row(i);
                        for j in 0..d {
                            gg[j] += grow[j] * (r[j] - mean[i]) * rstd[i];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for grow in g.chunks(d) {
                        for (o, v) in gb.iter_mut().zip(grow) {
                            *o += *v;
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let mut xhat = vec![T::zero(); d];
                    let mut dxhat = vec![T::zero(); d];
                    for (i, grow) in g.chunks(d).enumerate() {
                        let r = xv.row(i);
                        for j in 0..d {
                            xhat[j] = (r[j] - mean[i]) * rstd[i];
                            dxhat[j] = grow[j] * gv.data()[j];
                        }
                        let m1 = dxhat.iter().copied().sum::<T>() / dn;
                        let m2 = dot(&dxhat, &xhat) / dn;
                        let o = &mut gx[i * d..(i + 1) * d];
                        for j in 0..d {
                            o[j] += rstd[i] * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, v), xx) in gx.iter_mut().zip(g).zip(xv.data()) {
                        *o += *v * gelu_grad(*xx);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, v), xx) in gx.iter_mut().zip(g).zip(xv.data()) {
                        if *xx > T::zero() {
                            *o += *v;
                        }
                    }
                }
            }
            Op::Attention {
                qkv,
                heads,
                seq_len,
                probs,
                key_mask,
            } => {
                let qv = self.value(*qkv);
                let data = qv.data();
                let w3 = qv.cols();
                let d = w3 / 3;
                let dh = d / heads;
                let t = *seq_len;
                let batch = qv.rows() / t;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let Some(gq) = self.acc(grads, *qkv) else {
                    return;
                };
                let mut dp = vec![T::zero(); t];
                for b in 0..batch {
                    let base = b * t;
                    let valid = |s: usize| key_mask.as_ref().is_none_or(|m| m[base + s]);
                    for h in 0..*heads {
                        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                        for qi in 0..t {
                            let prow = &probs[((b * heads + h) * t + qi) * t..][..t];
                            let go = &g[(base + qi) * d + h * dh..][..dh];
                            let mut wsum = T::zero();
                            for s in 0..t {
                                if !valid(s) {
                                    continue;
                                }
                                let v = &data[(base + s) * w3 + vo..][..dh];
                                dp[s] = dot(go, v);
                                wsum += dp[s] * prow[s];
                                axpy(prow[s], go, &mut gq[(base + s) * w3 + vo..][..dh]);
                            }
                            for s in 0..t {
                                if !valid(s) {
                                    continue;
                                }
                                let ds = prow[s] * (dp[s] - wsum) * scale;
                                if ds == T::zero() {
                                    continue;
                                }
                                let k = &data[(base + s) * w3 + ko..][..dh];
                                axpy(ds, k, &mut gq[(base + qi) * w3 + qo..][..dh]);
                                let q = &data[(base + qi) * w3 + qo..][..dh];
                                axpy(ds, q, &mut gq[(base + s) * w3 + ko..][..dh]);
                            }
                        }
                    }
                }
            }
            Op::Combine { x, plan } => {
                let c = self.value(*x).cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..plan.out_rows() {
                        let grow = &g[i * c..(i + 1) * c];
                        for &(src, w) in plan.row(i) {
                            axpy(w, grow, &mut gx[src * c..(src + 1) * c]);
                        }
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).len();
                if let Some(ga) = self.acc(grads, *a) {
                    for (o, v) in ga.iter_mut().zip(&g[..na]) {
                        *o += *v;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (o, v) in gb.iter_mut().zip(&g[na..]) {
                        *o += *v;
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let w = ca + cb;
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, row) in g.chunks(w).enumerate() {
                        for (o, v) in ga[i * ca..(i + 1) * ca].iter_mut().zip(&row[..ca]) {
                            *o += *v;
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (i, row) in g.chunks(w).enumerate() {
                        for (o, v) in gb[i * cb..(i + 1) * cb].iter_mut().zip(&row[ca..]) {
                            *o += *v;
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let c = y.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, grow) in g.chunks(c).enumerate() {
                        let yr = y.row(i);
                        let proj = dot(yr, grow);
                        let inv = T::one() / norms[i];
                        let o = &mut gx[i * c..(i + 1) * c];
                        for j in 0..c {
                            o[j] += (grow[j] - yr[j] * proj) * inv;
                        }
                    }
                }
            }
            Op::PairDots { a, b, pairs } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = av.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (p, &(i, j)) in pairs.iter().enumerate() {
                        axpy(g[p], bv.row(j), &mut ga[i * c..(i + 1) * c]);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (p, &(i, j)) in pairs.iter().enumerate() {
                        axpy(g[p], av.row(i), &mut gb[j * c..(j + 1) * c]);
                    }
                }
            }
            Op::RowSqSum(x) => {
                let xv = self.value(*x);
                let c = xv.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..xv.rows() {
                        axpy(T::of(2.0) * g[i], xv.row(i), &mut gx[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::Mean(x) => {
                let n = T::of(self.value(*x).len().max(1) as f64);
                if let Some(gx) = self.acc(grads, *x) {
                    let v = g[0] / n;
                    for o in gx.iter_mut() {
                        *o += v;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let inv = g[0] / T::of(labels.len().max(1) as f64);
                if let Some(gl) = self.acc(grads, *logits) {
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let ind = if j == y { T::one() } else { T::zero() };
                            gl[i * c + j] += (probs[i * c + j] - ind) * inv;
                        }
                    }
                }
            }
        }
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a node, flattened in the node's layout.
    pub fn of(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Collects parameter gradients, summing over repeated leaves.
    pub fn params(&self, tape: &Tape<'_, T>) -> ParamGrads<T> {
        let n = tape.store.map_or(0, ParamStore::len);
        let mut out = ParamGrads::empty(n);
        for (idx, node) in tape.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &self.grads[idx]) {
                match &mut out.grads[id.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g) {
                            *a += *b;
                        }
                    }
                    slot @ None => {
                        *slot = Some(
                            Tensor::new(node.value.shape().to_vec(), g.clone())
                                .expect("gradient matches value"),
                        )
                    }
                }
            }
        }
        out
    }
}
