//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape order is already a
//! topological order and `backward` simply walks it in reverse.

use std::sync::Arc;

use rayon::prelude::*;

use super::tensor::{matmul_into, softmax_in_place, transpose_buf};
use super::{NumericsError, Tensor};

/// Handle to a node on a [`Graph`].
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
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Transpose(Var),
    Reshape(Var),
    Gather(Var, Arc<Vec<usize>>),
    Concat(Vec<Var>),
    Sum(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        /// Normalized pre-affine activations.
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Arc<Vec<usize>>,
        probs: Vec<f64>,
    },
    GroupedAttention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        /// Attention weights per group and head, `[groups][heads][gq × gk]`.
        weights: Vec<f64>,
    },
}

/// Shape bookkeeping for [`Graph::grouped_attention`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub groups: usize,
    pub heads: usize,
    /// Query rows per group.
    pub group_q: usize,
    /// Key/value rows per group.
    pub group_k: usize,
    pub dim: usize,
}

impl AttentionLayout {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn weights_per_group(&self) -> usize {
        self.heads * self.group_q * self.group_k
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when no path reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = super::tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    /// Adds a bias vector to every slice along the last axis.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.numel() != tx.last_dim() {
            return Err(mismatch("add_row", tx, tb));
        }
        let b = tb.data();
        let mut out = tx.clone();
        for chunk in out.data_mut().chunks_mut(b.len()) {
            for (o, &bv) in chunk.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.needs(&[x, bias]);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.needs(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.needs(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(NumericsError::InvalidAxis {
                axis: 1,
                rank: t.rank(),
            });
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let out = Tensor::new(vec![c, r], transpose_buf(t.data(), r, c))?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Element gather: output element `j` is input element `index[j]`.
    pub fn gather(
        &mut self,
        x: Var,
        index: Arc<Vec<usize>>,
        shape: &[usize],
    ) -> Result<Var, NumericsError> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(NumericsError::OutOfRange {
                op: "gather",
                index: bad,
                extent: src.len(),
            });
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Gather(x, index), rg))
    }

    /// Row gather on a matrix: output row `j` is input row `rows[j]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NumericsError> {
        let d = self.value(x).last_dim();
        let index: Vec<usize> = rows.iter().flat_map(|&r| (r * d)..(r * d + d)).collect();
        self.gather(x, Arc::new(index), &[rows.len(), d])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, NumericsError> {
        let shape_in = self.value(x).shape().to_vec();
        let index = super::tensor::permute_index(&shape_in, axes)?;
        let shape: Vec<usize> = axes.iter().map(|&a| shape_in[a]).collect();
        self.gather(x, Arc::new(index), &shape)
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&tensors)?;
        let rg = self.needs(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.needs(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(NumericsError::InvalidAxis {
                axis,
                rank: t.rank(),
            });
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let mut out = t.clone();
        let data = out.data_mut();
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = data[base + j * inner];
                }
                softmax_in_place(&mut buf);
                for (j, b) in buf.iter().enumerate() {
                    data[base + j * inner] = *b;
                }
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Softmax { input: x, axis }, rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let d = t.last_dim();
        for p in [gamma, beta] {
            if self.value(p).numel() != d {
                return Err(mismatch("layer_norm", t, self.value(p)));
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = t.rows();
        let mut xhat = vec![0.0; t.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean cross-entropy of row-wise logits `[n × C]` against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(logits);
        let c = t.last_dim();
        if t.rows() != targets.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(NumericsError::OutOfRange {
                op: "cross_entropy",
                index: bad,
                extent: c,
            });
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(c).zip(targets) {
            softmax_in_place(row);
            loss -= row[y].max(f64::MIN_POSITIVE).ln();
        }
        loss /= targets.len() as f64;
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: Arc::new(targets.to_vec()),
                probs,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention applied independently to
    /// contiguous row groups: query rows `[g·gq, (g+1)·gq)` attend to key and
    /// value rows `[g·gk, (g+1)·gk)`. Head `h` uses feature columns
    /// `[h·dk, (h+1)·dk)`. Inputs are already projected.
    pub fn grouped_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        heads: usize,
    ) -> Result<Var, NumericsError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.rank() != 2 || tk.rank() != 2 || tv.rank() != 2 {
            return Err(mismatch("grouped_attention", tq, tk));
        }
        let dim = tq.shape()[1];
        if tk.shape() != tv.shape() || tk.shape()[1] != dim {
            return Err(mismatch("grouped_attention", tq, tk));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(NumericsError::HeadSplit { dim, heads });
        }
        let (nq, nk) = (tq.shape()[0], tk.shape()[0]);
        if groups == 0 || nq % groups != 0 || nk % groups != 0 {
            return Err(NumericsError::GroupSplit {
                rows: nq.max(nk),
                groups,
            });
        }
        let layout = AttentionLayout {
            groups,
            heads,
            group_q: nq / groups,
            group_k: nk / groups,
            dim,
        };
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut out = vec![0.0; nq * dim];
        let mut weights = vec![0.0; groups * layout.weights_per_group()];
        out.par_chunks_mut(layout.group_q * dim)
            .zip(weights.par_chunks_mut(layout.weights_per_group()))
            .enumerate()
            .for_each(|(g, (out_g, w_g))| attend_group(&layout, g, qd, kd, vd, out_g, w_g));
        let out = Tensor::new(vec![nq, dim], out)?;
        let rg = self.needs(&[q, k, v]);
        Ok(self.push(
            out,
            Op::GroupedAttention {
                q,
                k,
                v,
                layout,
                weights,
            },
            rg,
        ))
    }

    /// Attention weights saved by a [`Graph::grouped_attention`] node,
    /// laid out `[groups][heads][group_q × group_k]`.
    pub fn attention_weights(&self, v: Var) -> Option<(&AttentionLayout, &[f64])> {
        match &self.nodes[v.0].op {
            Op::GroupedAttention {
                layout, weights, ..
            } => Some((layout, weights)),
            _ => None,
        }
    }

    /// Saved weights of every attention node, in tape order.
    pub fn all_attention_weights(&self) -> impl Iterator<Item = (&AttentionLayout, &[f64])> {
        self.nodes.iter().filter_map(|n| match &n.op {
            Op::GroupedAttention {
                layout, weights, ..
            } => Some((layout, weights.as_slice())),
            _ => None,
        })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(NumericsError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lt.shape()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.value(v).shape().to_vec(), data).expect("gradient matches input shape")
    }

    fn propagate(&self, node: &Node, up: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = up.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    let bt = transpose_buf(tb.data(), k, n);
                    let mut da = vec![0.0; m * k];
                    matmul_into(gd, &bt, &mut da, m, n, k);
                    self.accumulate(grads, *a, self.like(*a, da));
                }
                if self.nodes[b.0].requires_grad {
                    let at = transpose_buf(ta.data(), m, k);
                    let mut db = vec![0.0; k * n];
                    matmul_into(&at, gd, &mut db, k, m, n);
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, up.clone());
                self.accumulate(grads, *b, up.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, up.clone());
                self.accumulate(grads, *b, up.map(|v| -v));
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, up.clone());
                let d = self.value(*bias).numel();
                let mut db = vec![0.0; d];
                for chunk in gd.chunks(d) {
                    for (acc, g) in db.iter_mut().zip(chunk) {
                        *acc += g;
                    }
                }
                self.accumulate(grads, *bias, self.like(*bias, db));
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, up.map(|v| v * c)),
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let dx = gd
                    .iter()
                    .zip(xd)
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Transpose(x) => {
                let s = self.value(*x).shape();
                let dx = transpose_buf(gd, s[1], s[0]);
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Reshape(x) => self.accumulate(grads, *x, self.like(*x, gd.to_vec())),
            Op::Gather(x, index) => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (&i, &g) in index.iter().zip(gd) {
                    dx[i] += g;
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    self.accumulate(grads, *p, self.like(*p, gd[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            Op::Sum(x) => {
                let g = gd[0];
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, self.like(*x, vec![g; n]));
            }
            Op::Softmax { input, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len)
                            .map(|j| y[base + j * inner] * gd[base + j * inner])
                            .sum();
                        for j in 0..len {
                            let at = base + j * inner;
                            dx[at] = y[at] * (gd[at] - dot);
                        }
                    }
                }
                self.accumulate(grads, *input, self.like(*input, dx));
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let g = self.value(*gamma).data();
                let d = g.len();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; xhat.len()];
                for (r, &is) in inv_std.iter().enumerate() {
                    let row = r * d..(r + 1) * d;
                    let (xh, gr) = (&xhat[row.clone()], &gd[row.clone()]);
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        dgamma[j] += gr[j] * xh[j];
                        dbeta[j] += gr[j];
                        let dxh = gr[j] * g[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    for j in 0..d {
                        let dxh = gr[j] * g[j];
                        dx[r * d + j] = is * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                self.accumulate(grads, *input, self.like(*input, dx));
                self.accumulate(grads, *gamma, self.like(*gamma, dgamma));
                self.accumulate(grads, *beta, self.like(*beta, dbeta));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).last_dim();
                let scale = gd[0] / targets.len() as f64;
                let mut dx = probs.clone();
                for (row, &y) in dx.chunks_mut(c).zip(targets.iter()) {
                    row[y] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                self.accumulate(grads, *logits, self.like(*logits, dx));
            }
            Op::GroupedAttention {
                q,
                k,
                v,
                layout,
                weights,
            } => {
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let d = layout.dim;
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                dq.par_chunks_mut(layout.group_q * d)
                    .zip(dk.par_chunks_mut(layout.group_k * d))
                    .zip(dv.par_chunks_mut(layout.group_k * d))
                    .enumerate()
                    .for_each(|(g, ((dq_g, dk_g), dv_g))| {
                        attend_group_backward(layout, g, qd, kd, vd, weights, gd, dq_g, dk_g, dv_g)
                    });
                self.accumulate(grads, *q, self.like(*q, dq));
                self.accumulate(grads, *k, self.like(*k, dk));
                self.accumulate(grads, *v, self.like(*v, dv));
            }
        }
    }
}

/// `(outer, len, inner)` extents around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn attend_group(
    l: &AttentionLayout,
    g: usize,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    out: &mut [f64],
    w: &mut [f64],
) {
    let (d, dk) = (l.dim, l.head_dim());
    let scale = 1.0 / (dk as f64).sqrt();
    let q0 = g * l.group_q;
    let k0 = g * l.group_k;
    for h in 0..l.heads {
        let cols = h * dk..(h + 1) * dk;
        for i in 0..l.group_q {
            let qi = &q[(q0 + i) * d..][cols.clone()];
            let wrow = &mut w[(h * l.group_q + i) * l.group_k..][..l.group_k];
            for (j, wj) in wrow.iter_mut().enumerate() {
                let kj = &k[(k0 + j) * d..][cols.clone()];
                *wj = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_in_place(wrow);
            let orow = &mut out[i * d..][cols.clone()];
            for (j, &wj) in wrow.iter().enumerate() {
                let vj = &v[(k0 + j) * d..][cols.clone()];
                for (o, &vv) in orow.iter_mut().zip(vj) {
                    *o += wj * vv;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attend_group_backward(
    l: &AttentionLayout,
    g: usize,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    weights: &[f64],
    dout: &[f64],
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let (d, dkh) = (l.dim, l.head_dim());
    let scale = 1.0 / (dkh as f64).sqrt();
    let q0 = g * l.group_q;
    let k0 = g * l.group_k;
    let w_g = &weights[g * l.weights_per_group()..][..l.weights_per_group()];
    let mut ds = vec![0.0; l.group_k];
    for h in 0..l.heads {
        let cols = h * dkh..(h + 1) * dkh;
        for i in 0..l.group_q {
            let wrow = &w_g[(h * l.group_q + i) * l.group_k..][..l.group_k];
            let go = &dout[(q0 + i) * d..][cols.clone()];
            // dP = dO · Vᵀ, then softmax Jacobian.
            let mut dot = 0.0;
            for (j, dsj) in ds.iter_mut().enumerate() {
                let vj = &v[(k0 + j) * d..][cols.clone()];
                *dsj = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                dot += *dsj * wrow[j];
            }
            let qi = &q[(q0 + i) * d..][cols.clone()];
            for j in 0..l.group_k {
                let s = wrow[j] * (ds[j] - dot) * scale;
                let dv_row = &mut dv[j * d..][cols.clone()];
                for (a, &b) in dv_row.iter_mut().zip(go) {
                    *a += wrow[j] * b;
                }
                let kj = &k[(k0 + j) * d..][cols.clone()];
                let dq_row = &mut dq[i * d..][cols.clone()];
                for (a, &b) in dq_row.iter_mut().zip(kj) {
                    *a += s * b;
                }
                let dk_row = &mut dk[j * d..][cols.clone()];
                for (a, &b) in dk_row.iter_mut().zip(qi) {
                    *a += s * b;
                }
            }
        }
    }
}
