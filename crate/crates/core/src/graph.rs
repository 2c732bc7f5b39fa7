//! Reverse-mode automatic differentiation over a per-pass tape.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] (never copied); frozen parameters and
//! constants do not require gradients, so no backward work is done for
//! subgraphs that only depend on them. The tape is dropped after
//! [`Graph::backward`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{softmax_in_place, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Additive attention bias `alpha[h] * phi` shared across heads up to the gain.
pub struct AttentionBias {
    /// Per-head gains, shape `[heads]`.
    pub gains: Var,
    /// Fixed bias matrix `[n_q, n_k]`.
    pub phi: Tensor,
}

struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    groups: usize,
    nq: usize,
    nk: usize,
    bias: Option<AttentionBias>,
    /// `[groups][heads][nq][nk]`
    probs: Vec<f64>,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Attention(Box<AttentionCache>),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    BroadcastRow(Var),
    Reshape(Var),
    FeatureTokens {
        x: Var,
        w: Var,
        b: Var,
    },
    MaskedMse {
        pred: Var,
        target: Tensor,
        rows: Vec<usize>,
    },
    MaskedL1 {
        pred: Var,
        target: Tensor,
        rows: Vec<usize>,
    },
    MaskedCosine {
        pred: Var,
        target: Tensor,
        rows: Vec<usize>,
    },
    SumAll(Var),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Denominator guard for cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf whose gradient is tracked (used for input-gradient checks).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let needs = self.store.get(id).trainable;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: needs,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `x @ w + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 2 || xv.cols() != wv.shape()[0] {
            return Err(Error::shape(format!(
                "linear input {:?} weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (rows, din, dout) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != dout {
                return Err(Error::shape("linear bias width"));
            }
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(bv.data());
            }
        }
        gemm(
            rows,
            din,
            dout,
            1.0,
            (xv.data(), 0, din as isize, 1),
            (wv.data(), 0, dout as isize, 1),
            1.0,
            (&mut out, 0, dout as isize, 1),
        );
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let ng = self.needs_grad(x) || self.needs_grad(w) || b.is_some_and(|b| self.needs_grad(b));
        Ok(self.push(Tensor::from_vec(&shape, out), Op::Linear { x, w, b }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!("add {:?} + {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(av.shape(), data);
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds a last-axis vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        let c = xv.cols();
        if rv.len() != c {
            return Err(Error::shape(format!("row bias {:?} for {:?}", rv.shape(), xv.shape())));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let ng = self.needs_grad(x) || self.needs_grad(row);
        Ok(self.push(out, Op::AddRow(x, row), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!("mul {:?} * {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(av.shape(), data);
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let ng = self.needs_grad(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let ng = self.needs_grad(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let (gv, sv) = (self.value(gain), self.value(shift));
        if gv.len() != d || sv.len() != d || d == 0 {
            return Err(Error::shape("layer norm width"));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + sv.data()[j];
            }
        }
        let out = Tensor::from_vec(xv.shape(), out);
        let ng = self.needs_grad(x) || self.needs_grad(gain) || self.needs_grad(shift);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let ng = self.needs_grad(x);
        self.push(out, Op::Softmax(x), ng)
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[groups * nq, d]`, `k` and `v` are `[groups * nk, d]`; each
    /// group attends only within itself. Head `h` uses columns
    /// `h*d/heads..(h+1)*d/heads`. The optional bias adds `gains[h] * phi` to
    /// the logits of head `h` in every group.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: usize,
        bias: Option<AttentionBias>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if heads == 0 || d % heads != 0 || kv.cols() != d || vv.cols() != d {
            return Err(Error::shape(format!(
                "attention q {:?} k {:?} v {:?} heads {heads}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        if groups == 0 || qv.rows() % groups != 0 || kv.rows() % groups != 0 {
            return Err(Error::shape("attention group split"));
        }
        if kv.rows() != vv.rows() {
            return Err(Error::shape("attention key/value rows"));
        }
        let nq = qv.rows() / groups;
        let nk = kv.rows() / groups;
        if nk == 0 {
            return Err(Error::shape("attention over zero keys"));
        }
        if let Some(b) = &bias {
            if b.phi.len() != nq * nk || self.value(b.gains).len() != heads {
                return Err(Error::shape(format!(
                    "attention bias {:?} for {nq}x{nk}, {heads} heads",
                    b.phi.shape()
                )));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let gains: Option<Vec<f64>> = bias.as_ref().map(|b| self.value(b.gains).data().to_vec());
        let mut probs = vec![0.0; groups * heads * nq * nk];
        let mut out = vec![0.0; groups * nq * d];
        let (ds, di) = (d as isize, 1isize);
        for g in 0..groups {
            for h in 0..heads {
                let qoff = g * nq * d + h * dh;
                let koff = g * nk * d + h * dh;
                let poff = (g * heads + h) * nq * nk;
                let p = &mut probs[poff..poff + nq * nk];
                gemm(
                    nq,
                    dh,
                    nk,
                    scale,
                    (qv.data(), qoff, ds, di),
                    (kv.data(), koff, di, ds),
                    0.0,
                    (p, 0, nk as isize, 1),
                );
                if let (Some(b), Some(gs)) = (&bias, &gains) {
                    let a = gs[h];
                    for (x, f) in p.iter_mut().zip(b.phi.data()) {
                        *x += a * f;
                    }
                }
                for i in 0..nq {
                    softmax_in_place(&mut p[i * nk..(i + 1) * nk]);
                }
                gemm(
                    nq,
                    nk,
                    dh,
                    1.0,
                    (p, 0, nk as isize, 1),
                    (vv.data(), koff, ds, di),
                    0.0,
                    (&mut out, qoff, ds, di),
                );
            }
        }
        let out = Tensor::from_vec(&[groups * nq, d], out);
        let ng = self.needs_grad(q)
            || self.needs_grad(k)
            || self.needs_grad(v)
            || bias.as_ref().is_some_and(|b| self.needs_grad(b.gains));
        Ok(self.push(
            out,
            Op::Attention(Box::new(AttentionCache {
                q,
                k,
                v,
                heads,
                groups,
                nq,
                nk,
                bias,
                probs,
            })),
            ng,
        ))
    }

    /// Attention weights `[groups][heads][nq][nk]` recorded by an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<(&[f64], usize, usize, usize, usize)> {
        match &self.nodes[v.0].op {
            Op::Attention(c) => Some((&c.probs, c.groups, c.heads, c.nq, c.nk)),
            _ => None,
        }
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(Error::shape("gather_rows expects a matrix"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(Error::shape(format!("row index {bad} of {}", xv.rows())));
        }
        let out = xv.select_rows(idx);
        let ng = self.needs_grad(x);
        Ok(self.push(out, Op::GatherRows(x, idx.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c {
                return Err(Error::shape("concat_rows width mismatch"));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let ng = parts.iter().any(|&p| self.needs_grad(p));
        Ok(self.push(Tensor::from_vec(&[rows, c], data), Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Repeats a vector as `n` rows.
    pub fn broadcast_row(&mut self, x: Var, n: usize) -> Var {
        let xv = self.value(x);
        let c = xv.len();
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(xv.data());
        }
        let ng = self.needs_grad(x);
        self.push(Tensor::from_vec(&[n, c], data), Op::BroadcastRow(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.needs_grad(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Per-feature affine scalar embedding: `out[n, j, :] = x[n, j] * w[j] + b[j]`.
    pub fn feature_tokens(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let f = xv.cols();
        if wv.shape().len() != 2 || wv.shape()[0] != f || bv.shape() != wv.shape() {
            return Err(Error::shape(format!(
                "tokenizer {:?}/{:?} for {f} features",
                wv.shape(),
                bv.shape()
            )));
        }
        let d = wv.shape()[1];
        let n = xv.rows();
        let mut out = vec![0.0; n * f * d];
        for r in 0..n {
            for j in 0..f {
                let s = xv.data()[r * f + j];
                let o = &mut out[(r * f + j) * d..(r * f + j + 1) * d];
                for ((o, w), b) in o.iter_mut().zip(wv.row(j)).zip(bv.row(j)) {
                    *o = s * w + b;
                }
            }
        }
        let ng = self.needs_grad(x) || self.needs_grad(w) || self.needs_grad(b);
        Ok(self.push(Tensor::from_vec(&[n, f, d], out), Op::FeatureTokens { x, w, b }, ng))
    }

    fn check_masked(&self, pred: Var, target: &Tensor, rows: &[usize]) -> Result<()> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(Error::shape(format!(
                "prediction {:?} vs target {:?}",
                pv.shape(),
                target.shape()
            )));
        }
        if rows.is_empty() {
            return Err(Error::EmptyMask("reconstruction loss needs masked rows"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= pv.rows()) {
            return Err(Error::shape(format!("mask row {bad} of {}", pv.rows())));
        }
        Ok(())
    }

    /// Mean squared error over all entries of the masked rows.
    pub fn masked_mse(&mut self, pred: Var, target: &Tensor, rows: &[usize]) -> Result<Var> {
        self.check_masked(pred, target, rows)?;
        let pv = self.value(pred);
        let mut s = 0.0;
        for &r in rows {
            for (p, t) in pv.row(r).iter().zip(target.row(r)) {
                s += (p - t) * (p - t);
            }
        }
        let loss = s / (rows.len() * pv.cols()) as f64;
        let ng = self.needs_grad(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MaskedMse {
                pred,
                target: target.clone(),
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// Mean absolute error over all entries of the masked rows.
    pub fn masked_l1(&mut self, pred: Var, target: &Tensor, rows: &[usize]) -> Result<Var> {
        self.check_masked(pred, target, rows)?;
        let pv = self.value(pred);
        let mut s = 0.0;
        for &r in rows {
            for (p, t) in pv.row(r).iter().zip(target.row(r)) {
                s += (p - t).abs();
            }
        }
        let loss = s / (rows.len() * pv.cols()) as f64;
        let ng = self.needs_grad(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MaskedL1 {
                pred,
                target: target.clone(),
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// Mean over masked rows of `1 - cos(pred_i, target_i)`.
    pub fn masked_cosine(&mut self, pred: Var, target: &Tensor, rows: &[usize]) -> Result<Var> {
        self.check_masked(pred, target, rows)?;
        let pv = self.value(pred);
        let mut s = 0.0;
        for &r in rows {
            s += 1.0 - cosine(pv.row(r), target.row(r));
        }
        let loss = s / rows.len() as f64;
        let ng = self.needs_grad(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MaskedCosine {
                pred,
                target: target.clone(),
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs_grad(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::NonFinite(format!("loss = {}", lv.data()[0])));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut kept: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &gout, &mut grads);
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                kept[i] = Some(gout);
            }
        }
        let mut params: ParamGrads = vec![None; self.store.len()];
        for (&id, &v) in &self.params {
            if let Some(g) = kept[v.0].take() {
                params[id.0] = Some(g);
            }
        }
        Ok(Gradients { inputs: kept, params })
    }

    fn backward_node(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let n = self.value(v).len();
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(g);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                acc(*a, &mut |g| {
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        (gout, 0, n as isize, 1),
                        (bv.data(), 0, 1, n as isize),
                        1.0,
                        (g, 0, k as isize, 1),
                    )
                });
                acc(*b, &mut |g| {
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        (av.data(), 0, 1, k as isize),
                        (gout, 0, n as isize, 1),
                        1.0,
                        (g, 0, n as isize, 1),
                    )
                });
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (rows, din, dout) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
                acc(*x, &mut |g| {
                    gemm(
                        rows,
                        dout,
                        din,
                        1.0,
                        (gout, 0, dout as isize, 1),
                        (wv.data(), 0, 1, dout as isize),
                        1.0,
                        (g, 0, din as isize, 1),
                    )
                });
                acc(*w, &mut |g| {
                    gemm(
                        din,
                        rows,
                        dout,
                        1.0,
                        (xv.data(), 0, 1, din as isize),
                        (gout, 0, dout as isize, 1),
                        1.0,
                        (g, 0, dout as isize, 1),
                    )
                });
                if let Some(b) = b {
                    acc(*b, &mut |g| {
                        for r in 0..rows {
                            for (gb, go) in g.iter_mut().zip(&gout[r * dout..(r + 1) * dout]) {
                                *gb += go;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |g| {
                        for (gi, go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    });
                }
            }
            Op::AddRow(x, row) => {
                acc(*x, &mut |g| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
                let c = self.value(*row).len();
                acc(*row, &mut |g| {
                    for chunk in gout.chunks(c) {
                        for (gi, go) in g.iter_mut().zip(chunk) {
                            *gi += go;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |g| {
                    for ((gi, go), y) in g.iter_mut().zip(gout).zip(bv.data()) {
                        *gi += go * y;
                    }
                });
                acc(*b, &mut |g| {
                    for ((gi, go), x) in g.iter_mut().zip(gout).zip(av.data()) {
                        *gi += go * x;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |g| {
                for (gi, go) in g.iter_mut().zip(gout) {
                    *gi += c * go;
                }
            }),
            Op::Gelu(x) => {
                let xv = self.value(*x);
                acc(*x, &mut |g| {
                    for ((gi, go), xi) in g.iter_mut().zip(gout).zip(xv.data()) {
                        *gi += go * gelu_grad(*xi);
                    }
                })
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain);
                let d = gv.len();
                let rows = rstd.len();
                acc(*x, &mut |g| {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let go = &gout[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = go[j] * gv.data()[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xh[j];
                        }
                        let f = rstd[r] / d as f64;
                        for j in 0..d {
                            g[r * d + j] += f * (d as f64 * dxhat[j] - s1 - xh[j] * s2);
                        }
                    }
                });
                acc(*gain, &mut |g| {
                    for r in 0..rows {
                        for j in 0..d {
                            g[j] += gout[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                acc(*shift, &mut |g| {
                    for r in 0..rows {
                        for j in 0..d {
                            g[j] += gout[r * d + j];
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.as_ref().unwrap();
                let c = y.cols();
                acc(*x, &mut |g| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let go = &gout[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(go).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            g[r * c + j] += yr[j] * (go[j] - dot);
                        }
                    }
                });
            }
            Op::Attention(cache) => self.backward_attention(cache, gout, grads),
            Op::GatherRows(x, idx) => {
                let c = self.value(*x).cols();
                acc(*x, &mut |g| {
                    for (i, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            g[src * c + j] += gout[i * c + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(p, &mut |g| {
                        for (gi, go) in g.iter_mut().zip(&gout[off..off + n]) {
                            *gi += go;
                        }
                    });
                    off += n;
                }
            }
            Op::BroadcastRow(x) => {
                let c = self.value(*x).len();
                acc(*x, &mut |g| {
                    for chunk in gout.chunks(c) {
                        for (gi, go) in g.iter_mut().zip(chunk) {
                            *gi += go;
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |g| {
                for (gi, go) in g.iter_mut().zip(gout) {
                    *gi += go;
                }
            }),
            Op::FeatureTokens { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let f = xv.cols();
                let d = wv.shape()[1];
                let n = xv.rows();
                acc(*x, &mut |g| {
                    for r in 0..n {
                        for j in 0..f {
                            let go = &gout[(r * f + j) * d..(r * f + j + 1) * d];
                            g[r * f + j] += go.iter().zip(wv.row(j)).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                });
                acc(*w, &mut |g| {
                    for r in 0..n {
                        for j in 0..f {
                            let s = xv.data()[r * f + j];
                            let go = &gout[(r * f + j) * d..(r * f + j + 1) * d];
                            for (gi, o) in g[j * d..(j + 1) * d].iter_mut().zip(go) {
                                *gi += s * o;
                            }
                        }
                    }
                });
                acc(*b, &mut |g| {
                    for r in 0..n {
                        for j in 0..f {
                            let go = &gout[(r * f + j) * d..(r * f + j + 1) * d];
                            for (gi, o) in g[j * d..(j + 1) * d].iter_mut().zip(go) {
                                *gi += o;
                            }
                        }
                    }
                });
            }
            Op::MaskedMse { pred, target, rows } => {
                let pv = self.value(*pred);
                let c = pv.cols();
                let f = 2.0 * gout[0] / (rows.len() * c) as f64;
                acc(*pred, &mut |g| {
                    for &r in rows {
                        for j in 0..c {
                            g[r * c + j] += f * (pv.row(r)[j] - target.row(r)[j]);
                        }
                    }
                });
            }
            Op::MaskedL1 { pred, target, rows } => {
                let pv = self.value(*pred);
                let c = pv.cols();
                let f = gout[0] / (rows.len() * c) as f64;
                acc(*pred, &mut |g| {
                    for &r in rows {
                        for j in 0..c {
                            let diff = pv.row(r)[j] - target.row(r)[j];
                            let s = if diff > 0.0 {
                                1.0
                            } else if diff < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            g[r * c + j] += f * s;
                        }
                    }
                });
            }
            Op::MaskedCosine { pred, target, rows } => {
                let pv = self.value(*pred);
                let c = pv.cols();
                let f = -gout[0] / rows.len() as f64;
                acc(*pred, &mut |g| {
                    for &r in rows {
                        let (p, t) = (pv.row(r), target.row(r));
                        let np = p.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let nt = t.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let dot: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
                        let den = np * nt + COSINE_EPS;
                        for j in 0..c {
                            let mut dcos = t[j] / den;
                            if np > 0.0 {
                                dcos -= dot * nt * p[j] / (np * den * den);
                            }
                            g[r * c + j] += f * dcos;
                        }
                    }
                });
            }
            Op::SumAll(x) => acc(*x, &mut |g| {
                for gi in g.iter_mut() {
                    *gi += gout[0];
                }
            }),
        }
    }

    fn backward_attention(&self, c: &AttentionCache, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (qv, kv, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let d = qv.cols();
        let dh = d / c.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (nq, nk) = (c.nq, c.nk);
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut dgain = vec![0.0; c.heads];
        let mut dp = vec![0.0; nq * nk];
        let (ds, di) = (d as isize, 1isize);
        for g in 0..c.groups {
            for h in 0..c.heads {
                let qoff = g * nq * d + h * dh;
                let koff = g * nk * d + h * dh;
                let poff = (g * c.heads + h) * nq * nk;
                let p = &c.probs[poff..poff + nq * nk];
                gemm(
                    nq,
                    dh,
                    nk,
                    1.0,
                    (gout, qoff, ds, di),
                    (vv.data(), koff, di, ds),
                    0.0,
                    (&mut dp, 0, nk as isize, 1),
                );
                gemm(
                    nk,
                    nq,
                    dh,
                    1.0,
                    (p, 0, 1, nk as isize),
                    (gout, qoff, ds, di),
                    1.0,
                    (&mut dv, koff, ds, di),
                );
                for i in 0..nq {
                    let pr = &p[i * nk..(i + 1) * nk];
                    let dr = &mut dp[i * nk..(i + 1) * nk];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for (x, pj) in dr.iter_mut().zip(pr) {
                        *x = pj * (*x - dot);
                    }
                }
                if let Some(b) = &c.bias {
                    dgain[h] += dp.iter().zip(b.phi.data()).map(|(a, b)| a * b).sum::<f64>();
                }
                gemm(
                    nq,
                    nk,
                    dh,
                    scale,
                    (&dp, 0, nk as isize, 1),
                    (kv.data(), koff, ds, di),
                    1.0,
                    (&mut dq, qoff, ds, di),
                );
                gemm(
                    nk,
                    nq,
                    dh,
                    scale,
                    (&dp, 0, 1, nk as isize),
                    (qv.data(), qoff, ds, di),
                    1.0,
                    (&mut dk, koff, ds, di),
                );
            }
        }
        let mut add_into = |v: Var, src: &[f64]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; src.len()]);
            for (gi, s) in g.iter_mut().zip(src) {
                *gi += s;
            }
        };
        add_into(c.q, &dq);
        add_into(c.k, &dk);
        add_into(c.v, &dv);
        if let Some(b) = &c.bias {
            add_into(b.gains, &dgain);
        }
    }
}

pub(crate) fn cosine(p: &[f64], t: &[f64]) -> f64 {
    let np = p.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nt = t.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dot: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
    dot / (np * nt + COSINE_EPS)
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    inputs: Vec<Option<Vec<f64>>>,
    params: ParamGrads,
}

impl Gradients {
    /// Gradient of a leaf created with [`Graph::input`] or [`Graph::param`].
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.inputs.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params[id.0].as_deref()
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_input, check_params};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    const TOL: f64 = 1e-6;

    #[test]
    fn matmul_grad_both_operands() {
        let store = ParamStore::new();
        let b = rand_tensor(&[3, 3], 2);
        let r = check_input(&store, &rand_tensor(&[3, 3], 1), |g, a| {
            let bb = g.constant(b.clone());
            g.matmul(a, bb)
        })
        .unwrap();
        assert!(r.max_rel_err < TOL, "{r:?}");
        let a = rand_tensor(&[3, 3], 3);
        let r = check_input(&store, &b, |g, bv| {
            let aa = g.constant(a.clone());
            g.matmul(aa, bv)
        })
        .unwrap();
        assert!(r.max_rel_err < TOL, "{r:?}");
    }

    #[test]
    fn linear_layer_norm_gelu_grads() {
        let mut store = ParamStore::new();
        let w = store.add("w", rand_tensor(&[4, 3], 4), true);
        let b = store.add("b", rand_tensor(&[3], 5), false);
        let gn = store.add("g", rand_tensor(&[3], 6), false);
        let sh = store.add("s", rand_tensor(&[3], 7), false);
        let x = rand_tensor(&[2, 2, 4], 8);
        let fwd = |g: &mut Graph| {
            let xi = g.constant(x.clone());
            let (wv, bv, gv, sv) = (g.param(w), g.param(b), g.param(gn), g.param(sh));
            let h = g.linear(xi, wv, Some(bv))?;
            let h = g.layer_norm(h, gv, sv, 1e-6)?;
            Ok(g.gelu(h))
        };
        let r = check_params(&mut store, &[w, b, gn, sh], 100, fwd).unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
        let r = check_input(&store, &x, |g, xi| {
            let (wv, bv, gv, sv) = (g.param(w), g.param(b), g.param(gn), g.param(sh));
            let h = g.linear(xi, wv, Some(bv))?;
            g.layer_norm(h, gv, sv, 1e-6)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }

    #[test]
    fn layer_norm_constant_row_is_shift() {
        let mut store = ParamStore::new();
        let gn = store.add("g", Tensor::full(&[4], 1.0), false);
        let sh = store.add("s", Tensor::zeros(&[4]), false);
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::full(&[1, 4], 3.7));
        let (gv, sv) = (g.param(gn), g.param(sh));
        let y = g.layer_norm(x, gv, sv, 1e-6).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
        let x = g.constant(rand_tensor(&[5, 4], 9));
        let y = g.layer_norm(x, gv, sv, 1e-6).unwrap();
        for r in 0..5 {
            let m: f64 = g.value(y).row(r).iter().sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
        }
    }

    #[test]
    fn attention_grads_with_bias_and_groups() {
        let mut store = ParamStore::new();
        let gains = store.add("alpha", Tensor::from_vec(&[2], vec![1.0, -0.5]), false);
        let q = rand_tensor(&[2 * 3, 4], 10);
        let k = rand_tensor(&[2 * 5, 4], 11);
        let v = rand_tensor(&[2 * 5, 4], 12);
        let phi = rand_tensor(&[3, 5], 13);
        let fwd = |g: &mut Graph, qi: Var| {
            let kk = g.input(k.clone());
            let vv = g.input(v.clone());
            let a = g.param(gains);
            g.attention(
                qi,
                kk,
                vv,
                2,
                2,
                Some(AttentionBias {
                    gains: a,
                    phi: phi.clone(),
                }),
            )
        };
        let r = check_input(&store, &q, fwd).unwrap();
        assert!(r.max_rel_err < TOL, "{r:?}");
        let r = check_params(&mut store, &[gains], 4, |g| {
            let qq = g.constant(q.clone());
            fwd(g, qq)
        })
        .unwrap();
        assert!(r.max_rel_err < TOL, "{r:?}");
        // key and value gradients
        let r = check_input(&store, &k, |g, kk| {
            let qq = g.constant(q.clone());
            let vv = g.constant(v.clone());
            let a = g.param(gains);
            g.attention(
                qq,
                kk,
                vv,
                2,
                2,
                Some(AttentionBias {
                    gains: a,
                    phi: phi.clone(),
                }),
            )
        })
        .unwrap();
        assert!(r.max_rel_err < TOL, "{r:?}");
        let r = check_input(&store, &v, |g, vv| {
            let qq = g.constant(q.clone());
            let kk = g.constant(k.clone());
            g.attention(qq, kk, vv, 2, 2, None)
        })
        .unwrap();
        assert!(r.max_rel_err < TOL, "{r:?}");
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let q = g.constant(rand_tensor(&[4, 6], 1));
        let k = g.constant(rand_tensor(&[7, 6], 2));
        let a = g.attention(q, k, k, 3, 1, None).unwrap();
        let (p, _, _, _, nk) = g.attention_weights(a).unwrap();
        for row in p.chunks(nk) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let empty = g.constant(Tensor::zeros(&[0, 6]));
        assert!(g.attention(q, empty, empty, 3, 1, None).is_err());
    }

    #[test]
    fn structural_op_grads() {
        let mut store = ParamStore::new();
        let tokw = store.add("tw", rand_tensor(&[3, 4], 20), true);
        let tokb = store.add("tb", rand_tensor(&[3, 4], 21), false);
        let mtok = store.add("m", rand_tensor(&[4], 22), false);
        let x = rand_tensor(&[3, 3], 23);
        let fwd = |g: &mut Graph, xi: Var| {
            let (w, b, m) = (g.param(tokw), g.param(tokb), g.param(mtok));
            let t = g.feature_tokens(xi, w, b)?;
            let t = g.reshape(t, &[9, 4])?;
            let s = g.gather_rows(t, &[8, 0, 0, 4])?;
            let mm = g.broadcast_row(m, 2);
            let c = g.concat_rows(&[s, mm])?;
            let c = g.add_row(c, m)?;
            let c2 = g.scale(c, 0.5);
            let p = g.mul(c, c2)?;
            Ok(g.softmax(p))
        };
        let r = check_input(&store, &x, fwd).unwrap();
        assert!(r.max_rel_err < TOL, "{r:?}");
        let r = check_params(&mut store, &[tokw, tokb, mtok], 20, |g| {
            let xi = g.constant(x.clone());
            fwd(g, xi)
        })
        .unwrap();
        assert!(r.max_rel_err < TOL, "{r:?}");
    }

    #[test]
    fn masked_losses() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let t = rand_tensor(&[4, 2], 30);
        let p = g.constant(t.clone());
        let l = g.masked_mse(p, &t, &[1, 2]).unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);

        let mut pred = t.clone();
        pred.row_mut(1)[0] += 1.0;
        pred.row_mut(1)[1] -= 1.0;
        let p = g.constant(pred);
        let l = g.masked_mse(p, &t, &[1]).unwrap();
        assert_eq!(g.value(l).data(), &[1.0]);

        let pred = t.map(|v| v + 0.25);
        let p = g.constant(pred);
        let l = g.masked_l1(p, &t, &[0, 3]).unwrap();
        assert!((g.value(l).data()[0] - 0.25).abs() < 1e-15);

        let p = g.constant(t.clone());
        assert!(matches!(g.masked_mse(p, &t, &[]), Err(Error::EmptyMask(_))));
        assert!(g.masked_l1(p, &t, &[9]).is_err());

        let l = g.masked_cosine(p, &t, &[0, 1]).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-9);
        let neg = g.constant(t.map(|v| -v));
        let l = g.masked_cosine(neg, &t, &[0, 1]).unwrap();
        assert!((g.value(l).data()[0] - 2.0).abs() < 1e-9);
        let dbl = g.constant(t.map(|v| 2.0 * v));
        let l = g.masked_cosine(dbl, &t, &[0, 1]).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-9);
    }

    #[test]
    fn masked_loss_grads() {
        let store = ParamStore::new();
        let t = rand_tensor(&[5, 3], 40);
        let pred = rand_tensor(&[5, 3], 41);
        for kind in 0..3 {
            let r = check_input(&store, &pred, |g, p| match kind {
                0 => g.masked_mse(p, &t, &[0, 2, 4]),
                1 => g.masked_l1(p, &t, &[0, 2, 4]),
                _ => g.masked_cosine(p, &t, &[0, 2, 4]),
            })
            .unwrap();
            assert!(r.max_rel_err < TOL, "kind {kind}: {r:?}");
        }
    }

    #[test]
    fn l1_gradient_is_sign_over_count() {
        let store = ParamStore::new();
        let t = rand_tensor(&[3, 2], 50);
        let pred = rand_tensor(&[3, 2], 51);
        let mut g = Graph::new(&store);
        let p = g.input(pred.clone());
        let l = g.masked_l1(p, &t, &[1, 2]).unwrap();
        let grads = g.backward(l).unwrap();
        let gp = grads.wrt(p).unwrap();
        for r in 0..3 {
            for c in 0..2 {
                let expected = if r == 0 {
                    0.0
                } else {
                    (pred.get2(r, c) - t.get2(r, c)).signum() / 4.0
                };
                assert_eq!(gp[r * 2 + c], expected);
            }
        }
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", rand_tensor(&[2, 2], 60), true);
        store.get_mut(w).trainable = false;
        let mut g = Graph::new(&store);
        let x = g.constant(rand_tensor(&[1, 2], 61));
        let wv = g.param(w);
        let y = g.linear(x, wv, None).unwrap();
        let s = g.sum_all(y);
        assert!(!g.needs_grad(s));
        let grads = g.backward(s).unwrap();
        assert!(grads.param(w).is_none());
    }

    #[test]
    fn nan_loss_is_an_error() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::scalar(f64::NAN));
        assert!(matches!(g.backward(x), Err(Error::NonFinite(_))));
    }
}
