//! Reverse-mode tape over [`Tensor`] values.
//!
//! Every op appends a node holding its forward value. [`Tape::backward`] walks the
//! nodes in reverse and returns per-node and per-parameter gradients. Parameters enter
//! the tape through [`Tape::param`], which caches one node per [`ParamId`] so shared
//! parameters collect gradient from every use site in a single buffer.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::gemm;
use crate::numerics::{ParamId, ParamStore, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Attention mask applied inside every sequence segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMask {
    None,
    /// Query `i` sees keys `0..=i`.
    Causal,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Lerp {
        gate: Var,
        a: Var,
        b: Var,
    },
    Sigmoid(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    InterleaveCls {
        cls: Var,
        patches: Var,
        group: usize,
    },
    AddTiled {
        x: Var,
        pos: Var,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    L2NormRows {
        x: Var,
        norms: Vec<f64>,
    },
    Sum(Var),
    WeightedSum(Vec<(Var, f64)>),
    /// Scalar function of `x` whose gradient was computed during the forward pass.
    ScalarFn {
        x: Var,
        grad: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Result of a backward pass.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if any flowed there.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.nodes[var.0].as_ref()
    }

    /// Gradients of trainable parameters reached by the backward pass.
    pub fn params(&self) -> &[(ParamId, Tensor)] {
        &self.params
    }
}

impl<'s> Tape<'s> {
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn tracked(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.trainable);
        self.params.insert(id, v);
        v
    }

    fn check_matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::dim(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    /// `a · b`, or `a · bᵀ` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.check_matrix("matmul", a)?;
        let (br, bc) = self.check_matrix("matmul", b)?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            out.data_mut(),
            0.0,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, ng))
    }

    /// Adds a length-`d` bias to every row of an `n×d` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, d) = self.check_matrix("add_bias", x)?;
        if self.value(bias).len() != d {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(d) {
            for (o, bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(out, Op::AddBias { x, bias }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    /// `gate · a + (1 − gate) · b` with a one-element `gate`.
    pub fn lerp(&mut self, gate: Var, a: Var, b: Var) -> Result<Var> {
        if self.value(gate).len() != 1 {
            return Err(Error::dim("lerp", self.shape(gate), &[1]));
        }
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("lerp", self.shape(a), self.shape(b)));
        }
        let g = self.value(gate).item();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| g * x + (1.0 - g) * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(gate) || self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Lerp { gate, a, b }, ng))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let d = out.cols();
        for row in out.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        let ng = self.ng(x);
        self.push(out, Op::SoftmaxRows(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, d) = self.check_matrix("layer_norm", x)?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Tensor::zeros(&[n, d]);
        let mut out = Tensor::zeros(&[n, d]);
        let mut rstd = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            let xh = xhat.row_mut(i);
            for j in 0..d {
                xh[j] = (row[j] - mean) * r;
            }
            let o = out.row_mut(i);
            for j in 0..d {
                o[j] = xh[j] * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Scaled dot-product attention over independent segments of `seq` rows.
    ///
    /// `q`, `k`, `v` are `(groups·seq)×width`; the width is split into `heads` heads and
    /// each head uses scale `1/√(width/heads)`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        mask: AttnMask,
    ) -> Result<Var> {
        let (rows, width) = self.check_matrix("attention", q)?;
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return Err(Error::dim("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {width} not divisible by {heads} heads"
            )));
        }
        if seq == 0 || rows % seq != 0 {
            return Err(Error::dim("attention", &[rows], &[seq]));
        }
        let groups = rows / seq;
        let hd = width / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; groups * heads * seq * seq];
        let mut out = Tensor::zeros(&[rows, width]);
        let mut scores = vec![0.0; seq];
        for g in 0..groups {
            for h in 0..heads {
                let base = (g * heads + h) * seq * seq;
                let c0 = h * hd;
                for i in 0..seq {
                    let jmax = match mask {
                        AttnMask::None => seq,
                        AttnMask::Causal => i + 1,
                    };
                    let qi = &qv.row(g * seq + i)[c0..c0 + hd];
                    for (j, s) in scores.iter_mut().enumerate().take(jmax) {
                        let kj = &kv.row(g * seq + j)[c0..c0 + hd];
                        *s = scale * dot(qi, kj);
                    }
                    softmax_in_place(&mut scores[..jmax]);
                    probs[base + i * seq..base + i * seq + jmax].copy_from_slice(&scores[..jmax]);
                    let orow = &mut out.row_mut(g * seq + i)[c0..c0 + hd];
                    for (j, &p) in scores.iter().enumerate().take(jmax) {
                        let vj = &vv.row(g * seq + j)[c0..c0 + hd];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            },
            ng,
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let (n, d) = self.check_matrix("select_rows", x)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::dim("select_rows", &[n, d], &[bad]));
        }
        let xv = self.value(x);
        let mut out = Tensor::zeros(&[rows.len(), d]);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(xv.row(r));
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::SelectRows { x, rows }, ng))
    }

    /// Prepends the class row to every group of `group` patch rows.
    pub fn interleave_cls(&mut self, cls: Var, patches: Var, group: usize) -> Result<Var> {
        let (n, d) = self.check_matrix("interleave_cls", patches)?;
        if self.value(cls).len() != d || group == 0 || n % group != 0 {
            return Err(Error::dim("interleave_cls", self.shape(patches), self.shape(cls)));
        }
        let groups = n / group;
        let mut out = Tensor::zeros(&[groups * (group + 1), d]);
        let c = self.value(cls).data();
        let p = self.value(patches);
        for g in 0..groups {
            out.row_mut(g * (group + 1)).copy_from_slice(c);
            for i in 0..group {
                out.row_mut(g * (group + 1) + 1 + i)
                    .copy_from_slice(p.row(g * group + i));
            }
        }
        let ng = self.ng(cls) || self.ng(patches);
        Ok(self.push(
            out,
            Op::InterleaveCls {
                cls,
                patches,
                group,
            },
            ng,
        ))
    }

    /// Adds an `n×d` table to every consecutive block of `n` rows of `x`.
    pub fn add_tiled(&mut self, x: Var, pos: Var) -> Result<Var> {
        let (rows, d) = self.check_matrix("add_tiled", x)?;
        let (n, pd) = self.check_matrix("add_tiled", pos)?;
        if pd != d || n == 0 || rows % n != 0 {
            return Err(Error::dim("add_tiled", self.shape(x), self.shape(pos)));
        }
        let mut out = self.value(x).clone();
        let p = self.value(pos).data();
        for block in out.data_mut().chunks_mut(n * d) {
            for (o, pp) in block.iter_mut().zip(p) {
                *o += pp;
            }
        }
        let ng = self.ng(x) || self.ng(pos);
        Ok(self.push(out, Op::AddTiled { x, pos }, ng))
    }

    /// Gathers rows of an embedding table.
    pub fn embed(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        let (v, d) = self.check_matrix("embed", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!("token id {bad} out of vocabulary of {v}")));
        }
        let t = self.value(table);
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(id));
        }
        let ng = self.ng(table);
        Ok(self.push(out, Op::Embed { table, ids }, ng))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (n, _) = self.check_matrix("l2_normalize_rows", x)?;
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(n);
        for i in 0..n {
            let row = out.row_mut(i);
            let norm = dot(row, row).sqrt();
            if norm == 0.0 {
                return Err(Error::NonFinite("zero-norm row in l2 normalization".into()));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::L2NormRows { x, norms }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// `Σ wᵢ·xᵢ` over one-element inputs.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Result<Var> {
        let mut s = 0.0;
        for &(v, w) in &terms {
            if self.value(v).len() != 1 {
                return Err(Error::dim("weighted_sum", self.shape(v), &[1]));
            }
            s += w * self.value(v).item();
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(terms), ng))
    }

    /// Records a scalar `f(x)` given its value and `∂f/∂x`.
    pub fn scalar_fn(&mut self, x: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.shape(x) {
            return Err(Error::dim("scalar_fn", self.shape(x), grad.shape()));
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(value), Op::ScalarFn { x, grad }, ng))
    }

    /// Backpropagates from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params: Vec<(ParamId, Tensor)> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &grads[i] {
                    if node.needs_grad {
                        params.push((id, g.clone()));
                    }
                }
            }
        }
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = node.value.cols();
                if self.ng(*a) {
                    // dA = G·B (trans_b) or G·Bᵀ
                    let mut da = Tensor::zeros(&[m, k]);
                    gemm(m, n, k, g.data(), false, val(*b).data(), !trans_b, da.data_mut(), 0.0);
                    accumulate(grads, *a, da);
                }
                if self.ng(*b) {
                    let db = if *trans_b {
                        // B is n×k: dB = Gᵀ·A
                        let mut db = Tensor::zeros(&[n, k]);
                        gemm(n, m, k, g.data(), true, val(*a).data(), false, db.data_mut(), 0.0);
                        db
                    } else {
                        let mut db = Tensor::zeros(&[k, n]);
                        gemm(k, m, n, val(*a).data(), true, g.data(), false, db.data_mut(), 0.0);
                        db
                    };
                    accumulate(grads, *b, db);
                }
            }
            Op::AddBias { x, bias } => {
                if self.ng(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.ng(*bias) {
                    let d = g.cols();
                    let mut db = vec![0.0; d];
                    for row in g.data().chunks(d) {
                        for (a, b) in db.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    let db = Tensor::new(val(*bias).shape().to_vec(), db).expect("bias shape");
                    accumulate(grads, *bias, db);
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, zip_map(g, val(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    accumulate(grads, *b, zip_map(g, val(*a), |x, y| x * y));
                }
            }
            Op::Scale(x, c) => {
                accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::Lerp { gate, a, b } => {
                let lam = val(*gate).item();
                if self.ng(*gate) {
                    let s: f64 = g
                        .data()
                        .iter()
                        .zip(val(*a).data().iter().zip(val(*b).data()))
                        .map(|(gg, (x, y))| gg * (x - y))
                        .sum();
                    let dg = Tensor::new(val(*gate).shape().to_vec(), vec![s]).expect("gate");
                    accumulate(grads, *gate, dg);
                }
                if self.ng(*a) {
                    accumulate(grads, *a, g.map(|v| lam * v));
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.map(|v| (1.0 - lam) * v));
                }
            }
            Op::Sigmoid(x) => {
                let dx = zip_map(g, &node.value, |gg, s| gg * s * (1.0 - s));
                accumulate(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let dx = zip_map(g, val(*x), |gg, xx| gg * gelu_grad(xx));
                accumulate(grads, *x, dx);
            }
            Op::SoftmaxRows(x) => {
                let d = g.cols();
                let mut dx = Tensor::zeros(g.shape());
                for ((dr, gr), yr) in dx
                    .data_mut()
                    .chunks_mut(d)
                    .zip(g.data().chunks(d))
                    .zip(node.value.data().chunks(d))
                {
                    let s = dot(gr, yr);
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, d) = (g.rows(), g.cols());
                let gm = val(*gamma).data();
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for i in 0..n {
                        let (gr, xr) = (g.row(i), xhat.row(i));
                        for j in 0..d {
                            dg[j] += gr[j] * xr[j];
                            db[j] += gr[j];
                        }
                    }
                    if self.ng(*gamma) {
                        let t = Tensor::new(val(*gamma).shape().to_vec(), dg).expect("gamma");
                        accumulate(grads, *gamma, t);
                    }
                    if self.ng(*beta) {
                        let t = Tensor::new(val(*beta).shape().to_vec(), db).expect("beta");
                        accumulate(grads, *beta, t);
                    }
                }
                if self.ng(*x) {
                    let mut dx = Tensor::zeros(&[n, d]);
                    let mut gh = vec![0.0; d];
                    for i in 0..n {
                        let (gr, xr) = (g.row(i), xhat.row(i));
                        for j in 0..d {
                            gh[j] = gr[j] * gm[j];
                        }
                        let mean_g = gh.iter().sum::<f64>() / d as f64;
                        let mean_gx = dot(&gh, xr) / d as f64;
                        let dr = dx.row_mut(i);
                        for j in 0..d {
                            dr[j] = rstd[i] * (gh[j] - mean_g - xr[j] * mean_gx);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            } => {
                let (seq, heads) = (*seq, *heads);
                let (rows, width) = (g.rows(), g.cols());
                let groups = rows / seq;
                let hd = width / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let mut dq = Tensor::zeros(&[rows, width]);
                let mut dk = Tensor::zeros(&[rows, width]);
                let mut dv = Tensor::zeros(&[rows, width]);
                let mut dp = vec![0.0; seq];
                for gi in 0..groups {
                    for h in 0..heads {
                        let base = (gi * heads + h) * seq * seq;
                        let c0 = h * hd;
                        for i in 0..seq {
                            let p = &probs[base + i * seq..base + (i + 1) * seq];
                            let go = &g.row(gi * seq + i)[c0..c0 + hd];
                            for j in 0..seq {
                                if p[j] == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let vj = &vv.row(gi * seq + j)[c0..c0 + hd];
                                dp[j] = dot(go, vj);
                                let dvj = &mut dv.row_mut(gi * seq + j)[c0..c0 + hd];
                                for (d, x) in dvj.iter_mut().zip(go) {
                                    *d += p[j] * x;
                                }
                            }
                            let s = dot(p, &dp);
                            let qi = &qv.row(gi * seq + i)[c0..c0 + hd];
                            for j in 0..seq {
                                if p[j] == 0.0 {
                                    continue;
                                }
                                let ds = p[j] * (dp[j] - s) * scale;
                                let kj = &kv.row(gi * seq + j)[c0..c0 + hd];
                                let dqi = &mut dq.row_mut(gi * seq + i)[c0..c0 + hd];
                                for (d, x) in dqi.iter_mut().zip(kj) {
                                    *d += ds * x;
                                }
                                let dkj = &mut dk.row_mut(gi * seq + j)[c0..c0 + hd];
                                for (d, x) in dkj.iter_mut().zip(qi) {
                                    *d += ds * x;
                                }
                            }
                        }
                    }
                }
                if self.ng(*q) {
                    accumulate(grads, *q, dq);
                }
                if self.ng(*k) {
                    accumulate(grads, *k, dk);
                }
                if self.ng(*v) {
                    accumulate(grads, *v, dv);
                }
            }
            Op::SelectRows { x, rows } => {
                let mut dx = Tensor::zeros(val(*x).shape());
                for (i, &r) in rows.iter().enumerate() {
                    for (d, s) in dx.row_mut(r).iter_mut().zip(g.row(i)) {
                        *d += s;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::InterleaveCls {
                cls,
                patches,
                group,
            } => {
                let group = *group;
                let d = g.cols();
                let groups = g.rows() / (group + 1);
                if self.ng(*cls) {
                    let mut dc = vec![0.0; d];
                    for gi in 0..groups {
                        for (a, b) in dc.iter_mut().zip(g.row(gi * (group + 1))) {
                            *a += b;
                        }
                    }
                    let t = Tensor::new(val(*cls).shape().to_vec(), dc).expect("cls");
                    accumulate(grads, *cls, t);
                }
                if self.ng(*patches) {
                    let mut dp = Tensor::zeros(val(*patches).shape());
                    for gi in 0..groups {
                        for i in 0..group {
                            dp.row_mut(gi * group + i)
                                .copy_from_slice(g.row(gi * (group + 1) + 1 + i));
                        }
                    }
                    accumulate(grads, *patches, dp);
                }
            }
            Op::AddTiled { x, pos } => {
                if self.ng(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.ng(*pos) {
                    let mut dp = Tensor::zeros(val(*pos).shape());
                    let block = dp.len();
                    for chunk in g.data().chunks(block) {
                        for (a, b) in dp.data_mut().iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                    accumulate(grads, *pos, dp);
                }
            }
            Op::Embed { table, ids } => {
                let mut dt = Tensor::zeros(val(*table).shape());
                for (i, &id) in ids.iter().enumerate() {
                    for (a, b) in dt.row_mut(id).iter_mut().zip(g.row(i)) {
                        *a += b;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::L2NormRows { x, norms } => {
                let mut dx = Tensor::zeros(g.shape());
                for (i, &norm) in norms.iter().enumerate() {
                    let (gr, yr) = (g.row(i), node.value.row(i));
                    let s = dot(gr, yr);
                    for ((d, gg), y) in dx.row_mut(i).iter_mut().zip(gr).zip(yr) {
                        *d = (gg - y * s) / norm;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let gs = g.item();
                accumulate(grads, *x, Tensor::full(val(*x).shape(), gs));
            }
            Op::WeightedSum(terms) => {
                let gs = g.item();
                for &(v, w) in terms {
                    if self.ng(v) {
                        accumulate(grads, v, Tensor::full(val(v).shape(), gs * w));
                    }
                }
            }
            Op::ScalarFn { x, grad } => {
                let gs = g.item();
                accumulate(grads, *x, grad.map(|v| v * gs));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    normal_cdf(x) + x * pdf
}
