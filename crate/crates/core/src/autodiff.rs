//! A minimal reverse-mode tape over [`Mat`] values.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over
//! the node list is a valid topological traversal. Only the operations the
//! models in this crate need are provided.

use std::sync::Arc;

use crate::attention::{attend_head, attend_head_backward, AttentionPattern, HeadCache};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{log_sum_exp, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    /// tanh approximation
    Gelu,
    Silu,
    Tanh,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
        }
    }
}

/// Per-row focal cross-entropy `(1 - p)^γ · (−log p)` and its gradient
/// with respect to the logits of that row.
pub(crate) fn focal_ce_row(logits: &[f64], target: usize, gamma: f64) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(logits);
    let log_p = logits[target] - lse;
    let ce = -log_p;
    let p = log_p.exp();
    let one_minus = -log_p.exp_m1();
    let focal_w = one_minus.powf(gamma);
    let loss = focal_w * ce;
    // d loss / d p, multiplied by p
    let dp_times_p = if gamma == 0.0 {
        -1.0
    } else {
        let first = if one_minus > 0.0 { gamma * one_minus.powf(gamma - 1.0) * p * log_p } else { 0.0 };
        first - focal_w
    };
    let grad = logits
        .iter()
        .enumerate()
        .map(|(k, &z)| {
            let pk = (z - lse).exp();
            let delta = if k == target { 1.0 } else { 0.0 };
            dp_times_p * (delta - pk)
        })
        .collect();
    (loss, grad)
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Mat, inv_std: Vec<f64> },
    Gather { table: Var, ids: Vec<usize> },
    RowScale { x: Var, factors: Vec<f64> },
    Splice { base: Var, block: Var, start: usize },
    ConcatCols(Vec<Var>),
    SelectRows { x: Var, rows: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, heads: usize, scale: f64, caches: Vec<HeadCache> },
    FocalCe { logits: Var, grad: Mat },
    Mse { pred: Var, target: Mat },
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for each bound parameter, zero where it did not contribute.
    pub fn for_params(&self, bound: &[Var], store: &ParamStore) -> Vec<Mat> {
        bound
            .iter()
            .zip(store.values())
            .map(|(&v, p)| self.grads[v.0].clone().unwrap_or_else(|| Mat::zeros(p.rows(), p.cols())))
            .collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Register every parameter of `store` as a leaf, in id order.
    pub fn bind(&mut self, store: &ParamStore) -> Bound {
        Bound(store.values().iter().map(|m| self.leaf(m.clone())).collect())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b)).expect("matmul shapes");
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b)).expect("add shapes");
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b)).expect("sub shapes");
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y).expect("mul shapes");
        self.push(value, Op::Mul(a, b))
    }

    /// `a + 1·bias` with a `1 x c` bias broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "bias must be a row vector");
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (x, &bb) in value.row_mut(i).iter_mut().zip(b.row(0)) {
                *x += bb;
            }
        }
        self.push(value, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn act(&mut self, a: Var, f: Activation) -> Var {
        let value = self.value(a).map(|x| f.apply(x));
        self.push(value, Op::Act(a, f))
    }

    /// `x W + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let mut xhat = Mat::zeros(n, c);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + EPS).sqrt();
            for (o, &x) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (x - mean) * is;
            }
            inv_std.push(is);
        }
        let g = self.value(gain);
        let b = self.value(bias);
        let mut value = xhat.clone();
        for i in 0..n {
            for ((o, &gg), &bb) in value.row_mut(i).iter_mut().zip(g.row(0)).zip(b.row(0)) {
                *o = *o * gg + bb;
            }
        }
        self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Mat::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            value.set_row(r, t.row(id));
        }
        self.push(value, Op::Gather { table, ids: ids.to_vec() })
    }

    /// Multiply row `i` by the constant `factors[i]`.
    pub fn row_scale(&mut self, x: Var, factors: &[f64]) -> Var {
        let mut value = self.value(x).clone();
        assert_eq!(value.rows(), factors.len());
        for (i, &f) in factors.iter().enumerate() {
            value.row_mut(i).iter_mut().for_each(|v| *v *= f);
        }
        self.push(value, Op::RowScale { x, factors: factors.to_vec() })
    }

    /// `base` with rows `[start, start + block.rows)` replaced by `block`.
    pub fn splice(&mut self, base: Var, block: Var, start: usize) -> Var {
        let mut value = self.value(base).clone();
        let b = self.value(block);
        for r in 0..b.rows() {
            value.set_row(start + r, b.row(r));
        }
        self.push(value, Op::Splice { base, block, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Mat::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                value.row_mut(i)[offset..offset + m.cols()].copy_from_slice(m.row(i));
            }
            offset += m.cols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let xv = self.value(x);
        let mut value = Mat::zeros(rows.len(), xv.cols());
        for (r, &i) in rows.iter().enumerate() {
            value.set_row(r, xv.row(i));
        }
        self.push(value, Op::SelectRows { x, rows: rows.to_vec() })
    }

    /// Multi-head attention under `pattern`; heads are contiguous column
    /// blocks of `q`, `k` and `v`.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        pattern: &Arc<AttentionPattern>,
        heads: usize,
        scale: f64,
        dense: bool,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let dh = qv.cols() / heads;
        let dv = vv.cols() / heads;
        let mut value = Mat::zeros(qv.rows(), vv.cols());
        let mut caches = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = qv.slice_cols(h * dh, (h + 1) * dh);
            let kh = kv.slice_cols(h * dh, (h + 1) * dh);
            let vh = vv.slice_cols(h * dv, (h + 1) * dv);
            let (out, cache) = attend_head(&qh, &kh, &vh, pattern, scale, dense);
            for i in 0..out.rows() {
                value.row_mut(i)[h * dv..(h + 1) * dv].copy_from_slice(out.row(i));
            }
            caches.push(cache);
        }
        self.push(value, Op::Attention { q, k, v, heads, scale, caches })
    }

    /// `norm · Σ_i w_i (1 − p_i)^γ (−log p_i)` over the rows of `logits`.
    /// Rows with weight zero contribute nothing.
    pub fn focal_ce(&mut self, logits: Var, targets: &[usize], weights: &[f64], gamma: f64, norm: f64) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len());
        assert_eq!(lv.rows(), weights.len());
        let mut grad = Mat::zeros(lv.rows(), lv.cols());
        let mut total = 0.0;
        for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            let (loss, g) = focal_ce_row(lv.row(i), t, gamma);
            total += w * loss;
            for (o, gg) in grad.row_mut(i).iter_mut().zip(g) {
                *o = norm * w * gg;
            }
        }
        self.push(Mat::filled(1, 1, norm * total), Op::FocalCe { logits, grad })
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: &Mat) -> Var {
        let p = self.value(pred);
        let value = p.sub(target).expect("mse shapes").sum_sq() / p.len().max(1) as f64;
        self.push(Mat::filled(1, 1, value), Op::Mse { pred, target: target.clone() })
    }

    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b)).unwrap();
                    let db = self.value(*a).t_matmul(&g).unwrap();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |x, y| x * y).unwrap();
                    let db = g.zip_map(self.value(*a), |x, y| x * y).unwrap();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRow(a, bias) => {
                    let db = Mat::row_vector(&g.col_means()).scale(g.rows() as f64);
                    accumulate(&mut grads, *bias, db);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::Act(a, f) => {
                    let da = g.zip_map(self.value(*a), |gg, x| gg * f.derivative(x)).unwrap();
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let gv = self.value(*gain);
                    let (n, c) = g.shape();
                    let mut dx = Mat::zeros(n, c);
                    let mut dgain = Mat::zeros(1, c);
                    let mut dbias = Mat::zeros(1, c);
                    for i in 0..n {
                        let gr = g.row(i);
                        let xr = xhat.row(i);
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..c {
                            dgain[(0, j)] += gr[j] * xr[j];
                            dbias[(0, j)] += gr[j];
                            let d = gr[j] * gv[(0, j)];
                            sum_d += d;
                            sum_dx += d * xr[j];
                        }
                        let k = inv_std[i] / c as f64;
                        for j in 0..c {
                            let d = gr[j] * gv[(0, j)];
                            dx[(i, j)] = k * (c as f64 * d - sum_d - xr[j] * sum_dx);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gain, dgain);
                    accumulate(&mut grads, *bias, dbias);
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut dt = Mat::zeros(t.rows(), t.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &x) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::RowScale { x, factors } => {
                    let mut dx = g.clone();
                    for (i, &f) in factors.iter().enumerate() {
                        dx.row_mut(i).iter_mut().for_each(|v| *v *= f);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Splice { base, block, start } => {
                    let rows = self.value(*block).rows();
                    let dblock = g.slice_rows(*start, start + rows);
                    let mut dbase = g.clone();
                    for r in 0..rows {
                        dbase.row_mut(start + r).iter_mut().for_each(|v| *v = 0.0);
                    }
                    accumulate(&mut grads, *block, dblock);
                    accumulate(&mut grads, *base, dbase);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        accumulate(&mut grads, p, g.slice_cols(offset, offset + c));
                        offset += c;
                    }
                }
                Op::SelectRows { x, rows } => {
                    let xv = self.value(*x);
                    let mut dx = Mat::zeros(xv.rows(), xv.cols());
                    for (r, &i) in rows.iter().enumerate() {
                        for (o, &v) in dx.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Attention { q, k, v, heads, scale, caches } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let dh = qv.cols() / heads;
                    let dvw = vv.cols() / heads;
                    let mut dq = Mat::zeros(qv.rows(), qv.cols());
                    let mut dk = Mat::zeros(kv.rows(), kv.cols());
                    let mut dv = Mat::zeros(vv.rows(), vv.cols());
                    for (h, cache) in caches.iter().enumerate() {
                        let qh = qv.slice_cols(h * dh, (h + 1) * dh);
                        let kh = kv.slice_cols(h * dh, (h + 1) * dh);
                        let vh = vv.slice_cols(h * dvw, (h + 1) * dvw);
                        let gh = g.slice_cols(h * dvw, (h + 1) * dvw);
                        let (a, b, c) = attend_head_backward(&qh, &kh, &vh, cache, *scale, &gh);
                        for i in 0..qv.rows() {
                            dq.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(a.row(i));
                            dk.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(b.row(i));
                            dv.row_mut(i)[h * dvw..(h + 1) * dvw].copy_from_slice(c.row(i));
                        }
                    }
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *v, dv);
                }
                Op::FocalCe { logits, grad } => {
                    accumulate(&mut grads, *logits, grad.scale(g[(0, 0)]));
                }
                Op::Mse { pred, target } => {
                    let p = self.value(*pred);
                    let k = 2.0 * g[(0, 0)] / p.len().max(1) as f64;
                    accumulate(&mut grads, *pred, p.zip_map(target, |a, b| k * (a - b)).unwrap());
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Parameters bound as leaves on one tape.
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.index()]
    }
}
