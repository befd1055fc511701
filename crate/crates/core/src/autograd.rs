//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends a node holding its output value and whatever it needs
//! for the backward pass. Nodes are created in topological order, so the
//! backward sweep is a single reverse walk over the arena.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{adaptive_bins, gemm, gemm_strided, MatRef, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-9;
pub const KL_PRED_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    KlDivergence {
        pred: Var,
        target: Vec<f64>,
    },
    AdaptivePool {
        x: Var,
        out_rows: usize,
    },
    StraightThrough {
        soft: Var,
    },
    ScaleByElement {
        x: Var,
        weights: Var,
        index: usize,
    },
    Cosine {
        query: Var,
        keys: Var,
        query_norm: f64,
        key_norms: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a computation for later differentiation.
///
/// A tape is single-use for gradients: [`Tape::backward`] consumes the
/// record. Parameters pulled in with [`Tape::param`] are copied once per
/// tape, so repeated use of the same weight accumulates into one gradient.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    grad_enabled: bool,
    consumed: bool,
    relaxed: bool,
    param_vars: HashMap<ParamId, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            consumed: false,
            relaxed: false,
            param_vars: HashMap::new(),
        }
    }

    /// A tape that only evaluates; no node requires a gradient.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// A tape whose straight-through nodes forward their soft input, so
    /// the estimator's gradient is the true gradient of the recorded
    /// function. Meant for finite-difference checks.
    pub fn relaxed() -> Self {
        Tape {
            relaxed: true,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf holding `value`; `requires_grad` marks it as a differentiation
    /// target.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let needs = requires_grad && self.grad_enabled;
        self.push_unchecked(value, Op::Leaf, needs)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Pulls a parameter onto the tape (once per tape).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let needs = self.grad_enabled && store.is_trainable(id);
        let v = self.push_unchecked(
            store.value(id).clone(),
            Op::Leaf,
            needs,
        );
        self.param_vars.insert(id, v);
        v
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_unchecked(value, op, needs))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        match s {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    // ---------------------------------------------------------------- ops

    /// `a · b`, or `a · bᵀ` when `trans_b` is set.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (br, bc) = self.dims2(b, "matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!("inner dims {k} and {kb} (trans_b = {trans_b})"),
            ));
        }
        let mut out = vec![0.0; m * n];
        let bv = if trans_b {
            MatRef::transposed(self.value(b).data(), bc)
        } else {
            MatRef::row_major(self.value(b).data(), bc)
        };
        gemm(m, k, n, MatRef::row_major(self.value(a).data(), k), bv, &mut out, 0.0);
        let t = Tensor::new(vec![m, n], out)?;
        self.push("matmul", t, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(bias).len() != c {
            return Err(Error::shape(
                "add_bias",
                format!("{} columns, bias of {}", c, self.value(bias).len()),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(c) {
            for (v, bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        self.push("add_bias", t, Op::AddBias { x, bias }, &[x, bias])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v *= factor);
        self.push("scale", t, Op::Scale { x, factor }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        self.push("gelu", t, Op::Gelu(x), &[x])
    }

    /// Row-wise layer normalization followed by the affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("layer_norm", "affine width differs from columns"));
        }
        let rows = tx.rows();
        let mut xhat = Vec::with_capacity(tx.len());
        let mut rstd = Vec::with_capacity(rows);
        for row in tx.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|v| (v - mean) * r));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> = xhat
            .chunks(c)
            .flat_map(|row| row.iter().enumerate().map(|(j, v)| v * g[j] + b[j]))
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut t = self.value(x).clone();
        let c = t.cols();
        for row in t.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push("softmax", t, Op::Softmax(x), &[x])
    }

    /// Multi-head scaled dot-product attention over `L x D` projections.
    ///
    /// Each query row is normalized over its allowed keys only; blocked
    /// weights are exactly zero.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Arc<AttentionMask>) -> Result<Var> {
        let (l, d) = self.dims2(q, "attention")?;
        if self.value(k).shape() != [l, d] || self.value(v).shape() != [l, d] {
            return Err(Error::shape("attention", "q, k, v shapes differ"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", format!("{d} not divisible by {heads} heads")));
        }
        if mask.len() != l {
            return Err(Error::shape(
                "attention",
                format!("mask of size {} for sequence of {l}", mask.len()),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; heads * l * l];
        let mut out = vec![0.0; l * d];
        for h in 0..heads {
            let p = &mut probs[h * l * l..(h + 1) * l * l];
            gemm(
                l,
                dh,
                l,
                MatRef { data: &qd[h * dh..], row_stride: d, col_stride: 1 },
                MatRef { data: &kd[h * dh..], row_stride: 1, col_stride: d },
                p,
                0.0,
            );
            for i in 0..l {
                let row = &mut p[i * l..(i + 1) * l];
                masked_softmax(row, mask.row(i), scale);
            }
            gemm_strided(
                l,
                l,
                dh,
                MatRef::row_major(p, l),
                MatRef { data: &vd[h * dh..], row_stride: d, col_stride: 1 },
                &mut out[h * dh..],
                d,
                0.0,
            );
        }
        let t = Tensor::new(vec![l, d], out)?;
        self.push(
            "attention",
            t,
            Op::Attention { q, k, v, heads, probs },
            &[q, k, v],
        )
    }

    /// Gathers rows of an embedding table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::shape("embedding", "no ids"));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::shape("embedding", format!("id {bad} >= vocab {vocab}")));
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        self.push(
            "embedding",
            t,
            Op::Embedding { table, ids: ids.to_vec() },
            &[table],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let t = {
            let refs: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
            Tensor::concat_rows(&refs)?
        };
        self.push("concat_rows", t, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).slice_rows(start, len)?;
        self.push("slice_rows", t, Op::SliceRows { x, start }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        self.push("transpose", t, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean next-token cross-entropy over rows with a target; rows with
    /// `None` contribute neither loss nor gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, vocab) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {rows} rows", targets.len()),
            ));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::shape("cross_entropy", "no target rows"));
        }
        if targets.iter().flatten().any(|&t| t >= vocab) {
            return Err(Error::shape("cross_entropy", "target id outside vocabulary"));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, target) in probs.chunks_mut(vocab).zip(targets) {
            if let Some(t) = target {
                softmax_in_place(row);
                loss -= row[*t].max(f64::MIN_POSITIVE).ln();
            }
        }
        let t = Tensor::scalar(loss / count as f64);
        self.push(
            "cross_entropy",
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        )
    }

    /// `Σ target · (log target − log pred)` with `0 · log 0 = 0` and `pred`
    /// floored at [`KL_PRED_FLOOR`].
    pub fn kl_divergence(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(Error::shape(
                "kl_divergence",
                format!("{} predictions, {} targets", p.len(), target.len()),
            ));
        }
        let loss = kl_terms(target.data(), p.data());
        self.push(
            "kl_divergence",
            Tensor::scalar(loss),
            Op::KlDivergence {
                pred,
                target: target.data().to_vec(),
            },
            &[pred],
        )
    }

    /// Averages `L` rows into `out_rows` contiguous bins.
    pub fn adaptive_avg_pool(&mut self, x: Var, out_rows: usize) -> Result<Var> {
        let t = adaptive_avg_pool(self.value(x), out_rows)?;
        self.push("adaptive_avg_pool", t, Op::AdaptivePool { x, out_rows }, &[x])
    }

    /// Emits `hard` in the forward direction while routing gradients to
    /// `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var> {
        if self.value(soft).shape() != hard.shape() {
            return Err(Error::shape("straight_through", "hard and soft shapes differ"));
        }
        let value = if self.relaxed { self.value(soft).clone() } else { hard };
        self.push("straight_through", value, Op::StraightThrough { soft }, &[soft])
    }

    /// `x · weights[index]`.
    pub fn scale_by_element(&mut self, x: Var, weights: Var, index: usize) -> Result<Var> {
        let w = *self
            .value(weights)
            .data()
            .get(index)
            .ok_or_else(|| Error::shape("scale_by_element", format!("index {index} out of range")))?;
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v *= w);
        self.push(
            "scale_by_element",
            t,
            Op::ScaleByElement { x, weights, index },
            &[x, weights],
        )
    }

    /// Cosine similarity of one `D`-vector against each row of `K x D` keys.
    pub fn cosine(&mut self, query: Var, keys: Var) -> Result<Var> {
        let qv = self.value(query).data();
        let kt = self.value(keys);
        let d = kt.cols();
        if qv.len() != d {
            return Err(Error::shape("cosine", format!("query of {} vs keys of width {d}", qv.len())));
        }
        let query_norm = norm(qv);
        if query_norm == 0.0 {
            return Err(Error::invalid("cosine similarity of a zero-norm query"));
        }
        let mut key_norms = Vec::with_capacity(kt.rows());
        let mut out = Vec::with_capacity(kt.rows());
        for row in kt.data().chunks(d) {
            let kn = norm(row);
            if kn == 0.0 {
                return Err(Error::invalid("cosine similarity of a zero-norm key"));
            }
            key_norms.push(kn);
            out.push(dot(qv, row) / (query_norm * kn));
        }
        let t = Tensor::new(vec![out.len()], out)?;
        self.push(
            "cosine",
            t,
            Op::Cosine { query, keys, query_norm, key_norms },
            &[query, keys],
        )
    }

    // ----------------------------------------------------------- backward

    /// Populates gradients of `loss` with respect to every node that
    /// requires one. The tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Autograd("record already consumed".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Autograd(format!(
                "loss must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let n = self.nodes.len();
        self.grads = (0..n).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of every parameter leaf into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (&id, &v) in &self.param_vars {
            if let Some(g) = self.grad(v) {
                store.add_grad(id, g);
            }
        }
    }

    fn grad_buf(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn accumulate(&mut self, v: Var, g: impl IntoIterator<Item = f64>) {
        if let Some(buf) = self.grad_buf(v) {
            for (b, x) in buf.iter_mut().zip(g) {
                *b += x;
            }
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // The op is moved out so input nodes can be borrowed mutably; it is
        // restored at the end.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => self.back_matmul(i, *a, *b, *trans_b, g),
            Op::Add(a, b) => {
                self.accumulate(*a, g.iter().copied());
                self.accumulate(*b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g.iter().copied());
                self.accumulate(*b, g.iter().map(|x| -x));
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b).data().to_vec();
                let av = self.value(*a).data().to_vec();
                self.accumulate(*a, g.iter().zip(&bv).map(|(x, y)| x * y));
                self.accumulate(*b, g.iter().zip(&av).map(|(x, y)| x * y));
            }
            Op::AddBias { x, bias } => {
                self.accumulate(*x, g.iter().copied());
                let c = self.value(*bias).len();
                let mut gb = vec![0.0; c];
                for row in g.chunks(c) {
                    for (s, r) in gb.iter_mut().zip(row) {
                        *s += r;
                    }
                }
                self.accumulate(*bias, gb);
            }
            Op::Scale { x, factor } => self.accumulate(*x, g.iter().map(|v| v * factor)),
            Op::Gelu(x) => {
                let xv = self.value(*x).data().to_vec();
                self.accumulate(*x, g.iter().zip(&xv).map(|(gg, v)| gg * gelu_grad(*v)));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = self.value(*gamma).len();
                let gam = self.value(*gamma).data().to_vec();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; g.len()];
                for (r, ((grow, xrow), dxrow)) in g
                    .chunks(c)
                    .zip(xhat.chunks(c))
                    .zip(dx.chunks_mut(c))
                    .enumerate()
                {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        dgamma[j] += grow[j] * xrow[j];
                        dbeta[j] += grow[j];
                        let d = grow[j] * gam[j];
                        mean_d += d;
                        mean_dx += d * xrow[j];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for j in 0..c {
                        let d = grow[j] * gam[j];
                        dxrow[j] = rstd[r] * (d - mean_d - xrow[j] * mean_dx);
                    }
                }
                self.accumulate(*x, dx);
                self.accumulate(*gamma, dgamma);
                self.accumulate(*beta, dbeta);
            }
            Op::Softmax(x) => {
                let y = &self.nodes[i].value;
                let c = y.cols();
                let mut dx = vec![0.0; g.len()];
                for ((yr, gr), dr) in y.data().chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::Attention { q, k, v, heads, probs, .. } => {
                self.back_attention(*q, *k, *v, *heads, probs, g)
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).cols();
                if let Some(buf) = self.grad_buf(*table) {
                    for (row, &id) in g.chunks(d).zip(ids) {
                        for (b, x) in buf[id * d..(id + 1) * d].iter_mut().zip(row) {
                            *b += x;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.accumulate(*p, g[offset..offset + len].iter().copied());
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let c = self.value(*x).cols();
                let off = start * c;
                if let Some(buf) = self.grad_buf(*x) {
                    for (b, v) in buf[off..off + g.len()].iter_mut().zip(g) {
                        *b += v;
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let mut dx = vec![0.0; r * c];
                for a in 0..r {
                    for b in 0..c {
                        dx[a * c + b] = g[b * r + a];
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::Reshape(x) => self.accumulate(*x, g.iter().copied()),
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(*x, std::iter::repeat_n(g[0], n));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.accumulate(*x, std::iter::repeat_n(g[0] / n as f64, n));
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let vocab = self.value(*logits).cols();
                let scale = g[0] / *count as f64;
                let mut dx = vec![0.0; probs.len()];
                for ((pr, dr), t) in probs.chunks(vocab).zip(dx.chunks_mut(vocab)).zip(targets) {
                    if let Some(t) = t {
                        for j in 0..vocab {
                            dr[j] = scale * pr[j];
                        }
                        dr[*t] -= scale;
                    }
                }
                self.accumulate(*logits, dx);
            }
            Op::KlDivergence { pred, target } => {
                let p = self.value(*pred).data().to_vec();
                let dx = target.iter().zip(&p).map(|(t, pv)| {
                    if *t > 0.0 && *pv > KL_PRED_FLOOR {
                        -g[0] * t / pv
                    } else {
                        0.0
                    }
                });
                let dx: Vec<f64> = dx.collect();
                self.accumulate(*pred, dx);
            }
            Op::AdaptivePool { x, out_rows } => {
                let xt = self.value(*x);
                let (l, c) = (xt.rows(), xt.cols());
                let mut dx = vec![0.0; l * c];
                for (j, (s, e)) in adaptive_bins(l, *out_rows).into_iter().enumerate() {
                    let w = 1.0 / (e - s) as f64;
                    for r in s..e {
                        for col in 0..c {
                            dx[r * c + col] += w * g[j * c + col];
                        }
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::StraightThrough { soft } => self.accumulate(*soft, g.iter().copied()),
            Op::ScaleByElement { x, weights, index } => {
                let xv = self.value(*x).data();
                let w = self.value(*weights).data()[*index];
                let dw: f64 = g.iter().zip(xv).map(|(a, b)| a * b).sum();
                let kw = self.value(*weights).len();
                self.accumulate(*x, g.iter().map(|v| v * w));
                let mut dws = vec![0.0; kw];
                dws[*index] = dw;
                self.accumulate(*weights, dws);
            }
            Op::Cosine { query, keys, query_norm, key_norms } => {
                let qv = self.value(*query).data().to_vec();
                let kt = self.value(*keys).clone();
                let d = qv.len();
                let out = self.nodes[i].value.data().to_vec();
                let mut dq = vec![0.0; d];
                let mut dk = vec![0.0; kt.len()];
                for (r, row) in kt.data().chunks(d).enumerate() {
                    let (kn, s, gr) = (key_norms[r], out[r], g[r]);
                    for j in 0..d {
                        dq[j] += gr * (row[j] / (query_norm * kn) - s * qv[j] / (query_norm * query_norm));
                        dk[r * d + j] = gr * (qv[j] / (query_norm * kn) - s * row[j] / (kn * kn));
                    }
                }
                self.accumulate(*query, dq);
                self.accumulate(*keys, dk);
            }
        }
        self.nodes[i].op = op;
    }

    fn back_matmul(&mut self, _i: usize, a: Var, b: Var, trans_b: bool, g: &[f64]) {
        let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
        let bc = self.value(b).cols();
        let n = g.len() / m;
        if self.nodes[a.0].needs_grad {
            let bd = self.nodes[b.0].value.data().to_vec();
            // dA = dC · Bᵀ  (or dC · B when B was transposed)
            let bview = if trans_b {
                MatRef::row_major(&bd, bc)
            } else {
                MatRef::transposed(&bd, bc)
            };
            let buf = self.grad_buf(a).expect("needs grad");
            gemm(m, n, k, MatRef::row_major(g, n), bview, buf, 1.0);
        }
        if self.nodes[b.0].needs_grad {
            let ad = self.nodes[a.0].value.data().to_vec();
            let buf = self.grad_buf(b).expect("needs grad");
            if trans_b {
                // dB (n x k) = dCᵀ · A
                gemm(n, m, k, MatRef::transposed(g, n), MatRef::row_major(&ad, k), buf, 1.0);
            } else {
                // dB (k x n) = Aᵀ · dC
                gemm(k, m, n, MatRef::transposed(&ad, k), MatRef::row_major(g, n), buf, 1.0);
            }
        }
    }

    fn back_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, probs: &[f64], g: &[f64]) {
        let (l, d) = (self.value(q).shape()[0], self.value(q).shape()[1]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data().to_vec();
        let kd = self.value(k).data().to_vec();
        let vd = self.value(v).data().to_vec();
        let mut dq = vec![0.0; l * d];
        let mut dk = vec![0.0; l * d];
        let mut dv = vec![0.0; l * d];
        let mut dp = vec![0.0; l * l];
        for h in 0..heads {
            let p = &probs[h * l * l..(h + 1) * l * l];
            let go = MatRef { data: &g[h * dh..], row_stride: d, col_stride: 1 };
            // dP = dO · Vᵀ
            gemm(
                l,
                dh,
                l,
                go,
                MatRef { data: &vd[h * dh..], row_stride: 1, col_stride: d },
                &mut dp,
                0.0,
            );
            // dV = Pᵀ · dO
            gemm_strided(l, l, dh, MatRef::transposed(p, l), go, &mut dv[h * dh..], d, 0.0);
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), scaled
            for r in 0..l {
                let pr = &p[r * l..(r + 1) * l];
                let dr = &mut dp[r * l..(r + 1) * l];
                let s: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for j in 0..l {
                    dr[j] = pr[j] * (dr[j] - s) * scale;
                }
            }
            // dQ = dS · K ; dK = dSᵀ · Q
            gemm_strided(
                l,
                l,
                dh,
                MatRef::row_major(&dp, l),
                MatRef { data: &kd[h * dh..], row_stride: d, col_stride: 1 },
                &mut dq[h * dh..],
                d,
                0.0,
            );
            gemm_strided(
                l,
                l,
                dh,
                MatRef::transposed(&dp, l),
                MatRef { data: &qd[h * dh..], row_stride: d, col_stride: 1 },
                &mut dk[h * dh..],
                d,
                0.0,
            );
        }
        self.accumulate(q, dq);
        self.accumulate(k, dk);
        self.accumulate(v, dv);
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax of `scale · row` restricted to entries where `allowed` is set;
/// all other entries become exactly zero.
fn masked_softmax(row: &mut [f64], allowed: &[bool], scale: f64) {
    let mut max = f64::NEG_INFINITY;
    for (v, &a) in row.iter().zip(allowed) {
        if a {
            max = max.max(*v * scale);
        }
    }
    let mut sum = 0.0;
    for (v, &a) in row.iter_mut().zip(allowed) {
        if a {
            *v = (*v * scale - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    for (v, &a) in row.iter_mut().zip(allowed) {
        if a {
            *v /= sum;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn kl_terms(target: &[f64], pred: &[f64]) -> f64 {
    target
        .iter()
        .zip(pred)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, p)| t * (t.ln() - p.max(KL_PRED_FLOOR).ln()))
        .sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Adaptive 1-D average pooling of an `L x C` matrix to `out_rows x C`.
pub fn adaptive_avg_pool(x: &Tensor, out_rows: usize) -> Result<Tensor> {
    let (l, c) = (x.rows(), x.cols());
    if out_rows == 0 || out_rows > l {
        return Err(Error::invalid(format!(
            "adaptive pool to {out_rows} rows from {l} (need 1 <= P <= L)"
        )));
    }
    let mut out = vec![0.0; out_rows * c];
    for (j, (s, e)) in adaptive_bins(l, out_rows).into_iter().enumerate() {
        let o = &mut out[j * c..(j + 1) * c];
        for r in s..e {
            for (a, b) in o.iter_mut().zip(x.row(r)) {
                *a += b;
            }
        }
        let w = (e - s) as f64;
        o.iter_mut().for_each(|v| *v /= w);
    }
    Tensor::new(vec![out_rows, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let mut tape = Tape::new();
        let p = t(&[4], &[0.1, 0.2, 0.3, 0.4]);
        let pv = tape.constant(p.clone());
        let l = tape.kl_divergence(pv, &p).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1., -2., 3., 0.5, 0.25, -1.]), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn softmax_sum_gradient_vanishes() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[0.3, -0.7, 0.1, 0.9, 0.4, -0.2]), true);
        let y = tape.softmax(x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), true);
        assert!(tape.backward(x).is_err());
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Autograd(_))));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[1e300]));
        assert!(matches!(tape.scale(x, 1e300), Err(Error::NonFinite(_))));
    }

    #[test]
    fn concat_routes_gradient_slices_exactly() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 2], &[1., 2.]), true);
        let b = tape.leaf(t(&[2, 2], &[3., 4., 5., 6.]), true);
        let c = tape.concat_rows(&[a, b]).unwrap();
        let w = tape.constant(t(&[3, 2], &[0.5, -1.5, 2.0, 3.0, -4.0, 7.0]));
        let m = tape.mul(c, w).unwrap();
        let s = tape.sum(m).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.5, -1.5]);
        assert_eq!(tape.grad(b).unwrap(), &[2.0, 3.0, -4.0, 7.0]);
    }

    #[test]
    fn adaptive_pool_examples() {
        let x = t(&[4, 1], &[1., 3., 5., 9.]);
        assert_eq!(adaptive_avg_pool(&x, 2).unwrap().data(), &[2.0, 7.0]);
        assert_eq!(adaptive_avg_pool(&x, 1).unwrap().data(), &[4.5]);
        assert!(adaptive_avg_pool(&x, 4).unwrap().bit_eq(&x));
        assert!(adaptive_avg_pool(&x, 0).is_err());
        assert!(adaptive_avg_pool(&x, 5).is_err());
    }

    #[test]
    fn straight_through_forwards_hard_values() {
        let mut tape = Tape::new();
        let soft = tape.leaf(t(&[3], &[0.2, 0.5, 0.3]), true);
        let st = tape.straight_through(soft, t(&[3], &[0., 1., 0.])).unwrap();
        assert_eq!(tape.value(st).data(), &[0., 1., 0.]);
        let w = tape.constant(t(&[3], &[2., 3., 4.]));
        let m = tape.mul(st, w).unwrap();
        let s = tape.sum(m).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(soft).unwrap(), &[2., 3., 4.]);
    }

    #[test]
    fn cosine_rejects_zero_vectors() {
        let mut tape = Tape::new();
        let q = tape.constant(t(&[2], &[0., 0.]));
        let k = tape.constant(t(&[1, 2], &[1., 0.]));
        assert!(tape.cosine(q, k).is_err());
    }
}
