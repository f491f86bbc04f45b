//! Minimal reverse-mode automatic differentiation over row-major matrices.
//!
//! Every value is an `Array2<f64>`. Sequences are flattened to
//! `[batch * seq_len, features]`; the attention op knows the layout. Scalars
//! are `1 x 1` matrices. A [`Tape`] lives for one forward/backward pass.

use std::rc::Rc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::losses::kernel::{gaussian_mix_grad_coeff, mmd_value, sq_dist};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sequence layout shared by the attention op.
#[derive(Debug, Clone)]
pub struct SeqLayout {
    pub batch: usize,
    pub seq_len: usize,
    /// `key_valid[b * seq_len + t]`
    pub key_valid: Vec<bool>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Rc<Array2<f64>>),
    Mul(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Rc<SeqLayout>,
        probs: Vec<Array2<f64>>,
    },
    Embed {
        table: Var,
        ids: Rc<Vec<usize>>,
    },
    Softmax(Var),
    GatherRows(Var, Rc<Vec<usize>>),
    Nll {
        p: Var,
        targets: Rc<Vec<usize>>,
    },
    Mse {
        a: Var,
        target: Rc<Array2<f64>>,
    },
    Mmd {
        s: Var,
        t: Var,
        sigmas: Vec<f64>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` where no gradient flowed.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, delta: Array2<f64>) {
    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `x + bias` with a `1 x d` bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let value = self.value(x) + self.value(bias);
        let rg = self.rg(x) || self.rg(bias);
        self.push(value, Op::AddRow(x, bias), rg)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Rc<Array2<f64>>) -> Var {
        let value = self.value(a) * &*c;
        let rg = self.rg(a);
        self.push(value, Op::MulConst(a, c), rg)
    }

    /// Elementwise product; a `1 x 1` operand broadcasts.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let value = if va.dim() == vb.dim() {
            va * vb
        } else if vb.dim() == (1, 1) {
            va * vb[[0, 0]]
        } else if va.dim() == (1, 1) {
            vb * va[[0, 0]]
        } else {
            panic!("mul shape mismatch {:?} vs {:?}", va.dim(), vb.dim());
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()));
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Row-wise layer normalization with `1 x d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = Array2::zeros(xv.raw_dim());
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for (row, mut out) in xv.rows().into_iter().zip(xhat.rows_mut()) {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            Zip::from(&mut out).and(&row).for_each(|o, &v| *o = (v - mean) * is);
            inv_std.push(is);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention over flattened sequences.
    /// Keys with `key_valid == false` receive exactly zero weight.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, layout: Rc<SeqLayout>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let t = layout.seq_len;
        let mut out = Array2::zeros(qv.raw_dim());
        let mut probs = Vec::with_capacity(layout.batch * heads);
        for b in 0..layout.batch {
            let rows = b * t..(b + 1) * t;
            let valid = &layout.key_valid[rows.clone()];
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![rows.clone(), cols.clone()]);
                let kh = kv.slice(s![rows.clone(), cols.clone()]);
                let vh = vv.slice(s![rows.clone(), cols.clone()]);
                let mut p = qh.dot(&kh.t()) * scale;
                for mut row in p.rows_mut() {
                    let max = row
                        .iter()
                        .zip(valid)
                        .filter(|(_, &ok)| ok)
                        .map(|(&x, _)| x)
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for (x, &ok) in row.iter_mut().zip(valid) {
                        *x = if ok { (*x - max).exp() } else { 0.0 };
                        sum += *x;
                    }
                    row.mapv_inplace(|x| x / sum);
                }
                out.slice_mut(s![rows.clone(), cols]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            },
            rg,
        )
    }

    /// Row lookup into an embedding table.
    pub fn embed(&mut self, table: Var, ids: Rc<Vec<usize>>) -> Var {
        let tv = self.value(table);
        let mut value = Array2::zeros((ids.len(), tv.ncols()));
        for (mut row, &id) in value.rows_mut().into_iter().zip(ids.iter()) {
            row.assign(&tv.row(id));
        }
        let rg = self.rg(table);
        self.push(value, Op::Embed { table, ids }, rg)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x).view());
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    pub fn gather_rows(&mut self, x: Var, rows: Rc<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let value = xv.select(Axis(0), &rows);
        let rg = self.rg(x);
        self.push(value, Op::GatherRows(x, rows), rg)
    }

    /// Mean of `-ln p[i, targets[i]]` over rows.
    pub fn nll(&mut self, p: Var, targets: Rc<Vec<usize>>) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.nrows(), targets.len());
        let n = targets.len() as f64;
        let sum: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &y)| -pv[[i, y]].max(PROB_FLOOR).ln())
            .sum();
        let rg = self.rg(p);
        self.push(Array2::from_elem((1, 1), sum / n), Op::Nll { p, targets }, rg)
    }

    /// Mean squared difference to a constant target over all entries.
    pub fn mse(&mut self, a: Var, target: Rc<Array2<f64>>) -> Var {
        let av = self.value(a);
        assert_eq!(av.dim(), target.dim());
        let n = av.len() as f64;
        let sum: f64 = Zip::from(av)
            .and(&*target)
            .fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y));
        let rg = self.rg(a);
        self.push(Array2::from_elem((1, 1), sum / n), Op::Mse { a, target }, rg)
    }

    /// Biased squared MMD between row sets under a Gaussian mixture kernel.
    pub fn mmd(&mut self, s: Var, t: Var, sigmas: Vec<f64>) -> Var {
        let value = mmd_value(self.value(s).view(), self.value(t).view(), &sigmas);
        let rg = self.rg(s) || self.rg(t);
        self.push(Array2::from_elem((1, 1), value), Op::Mmd { s, t, sigmas }, rg)
    }

    /// `sum_i c_i * v_i` over same-shaped operands.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        assert!(!terms.is_empty());
        let mut value = self.value(terms[0].0) * terms[0].1;
        for &(v, c) in &terms[1..] {
            value.scaled_add(c, self.value(v));
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(value, Op::WeightedSum(terms), rg)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, op: &Op, out: &Array2<f64>, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], self.value(*a).t().dot(g));
                }
            }
            Op::AddRow(x, b) => {
                if self.rg(*x) {
                    accumulate(&mut grads[x.0], g.clone());
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Scale(a, c) => accumulate(&mut grads[a.0], g * *c),
            Op::MulConst(a, c) => accumulate(&mut grads[a.0], g * &**c),
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                for (this, other, this_v) in [(*a, vb, va), (*b, va, vb)] {
                    if !self.rg(this) {
                        continue;
                    }
                    let full = if other.dim() == g.dim() {
                        g * other
                    } else {
                        g * other[[0, 0]]
                    };
                    let delta = if this_v.dim() == (1, 1) && g.dim() != (1, 1) {
                        Array2::from_elem((1, 1), full.sum())
                    } else {
                        full
                    };
                    accumulate(&mut grads[this.0], delta);
                }
            }
            Op::Gelu(x) => {
                let mut dx = self.value(*x).clone();
                Zip::from(&mut dx).and(g).for_each(|v, &gi| {
                    let x = *v;
                    let u = GELU_C * (x + GELU_A * x * x * x);
                    let th = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    *v = gi * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du);
                });
                accumulate(&mut grads[x.0], dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.rg(*gamma) {
                    accumulate(&mut grads[gamma.0], (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*beta) {
                    accumulate(&mut grads[beta.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*x) {
                    let dxhat = g * self.value(*gamma);
                    let d = xhat.ncols() as f64;
                    let mut dx = Array2::zeros(xhat.raw_dim());
                    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let dh = dxhat.row(i);
                        let xh = xhat.row(i);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.dot(&xh);
                        let c = inv_std[i] / d;
                        Zip::from(&mut row)
                            .and(&dh)
                            .and(&xh)
                            .for_each(|o, &a, &b| *o = c * (d * a - sum_dh - b * sum_dh_xh));
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.ncols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let t = layout.seq_len;
                let mut dq = Array2::zeros(qv.raw_dim());
                let mut dk = Array2::zeros(kv.raw_dim());
                let mut dv = Array2::zeros(vv.raw_dim());
                for b in 0..layout.batch {
                    let rows = b * t..(b + 1) * t;
                    for h in 0..*heads {
                        let p = &probs[b * heads + h];
                        let cols = h * dh..(h + 1) * dh;
                        let go = g.slice(s![rows.clone(), cols.clone()]);
                        let qh = qv.slice(s![rows.clone(), cols.clone()]);
                        let kh = kv.slice(s![rows.clone(), cols.clone()]);
                        let vh = vv.slice(s![rows.clone(), cols.clone()]);
                        dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&go));
                        let mut ds = go.dot(&vh.t());
                        for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let dot = drow.dot(&prow);
                            Zip::from(&mut drow)
                                .and(&prow)
                                .for_each(|x, &pi| *x = pi * (*x - dot) * scale);
                        }
                        dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&kh));
                        dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qh));
                    }
                }
                if self.rg(*q) {
                    accumulate(&mut grads[q.0], dq);
                }
                if self.rg(*k) {
                    accumulate(&mut grads[k.0], dk);
                }
                if self.rg(*v) {
                    accumulate(&mut grads[v.0], dv);
                }
            }
            Op::Embed { table, ids } => {
                let mut dt = Array2::zeros(self.value(*table).raw_dim());
                for (row, &id) in g.rows().into_iter().zip(ids.iter()) {
                    let mut target = dt.row_mut(id);
                    target += &row;
                }
                accumulate(&mut grads[table.0], dt);
            }
            Op::Softmax(x) => {
                let mut dx = g * out;
                for (mut drow, prow) in dx.rows_mut().into_iter().zip(out.rows()) {
                    let dot = drow.sum();
                    Zip::from(&mut drow).and(&prow).for_each(|v, &p| *v -= p * dot);
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::GatherRows(x, rows) => {
                let mut dx = Array2::zeros(self.value(*x).raw_dim());
                for (grow, &r) in g.rows().into_iter().zip(rows.iter()) {
                    let mut target = dx.row_mut(r);
                    target += &grow;
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Nll { p, targets } => {
                let pv = self.value(*p);
                let scale = g[[0, 0]] / targets.len() as f64;
                let mut dp = Array2::zeros(pv.raw_dim());
                for (i, &y) in targets.iter().enumerate() {
                    dp[[i, y]] = -scale / pv[[i, y]].max(PROB_FLOOR);
                }
                accumulate(&mut grads[p.0], dp);
            }
            Op::Mse { a, target } => {
                let av = self.value(*a);
                let c = 2.0 * g[[0, 0]] / av.len() as f64;
                accumulate(&mut grads[a.0], (av - &**target) * c);
            }
            Op::Mmd { s, t, sigmas } => {
                let (ds, dt) = mmd_grad(self.value(*s).view(), self.value(*t).view(), sigmas);
                let c = g[[0, 0]];
                if self.rg(*s) {
                    accumulate(&mut grads[s.0], ds * c);
                }
                if self.rg(*t) {
                    accumulate(&mut grads[t.0], dt * c);
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    if self.rg(v) {
                        accumulate(&mut grads[v.0], g * c);
                    }
                }
            }
        }
    }
}

pub fn softmax_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn mmd_grad(s: ArrayView2<f64>, t: ArrayView2<f64>, sigmas: &[f64]) -> (Array2<f64>, Array2<f64>) {
    let (m, n) = (s.nrows() as f64, t.nrows() as f64);
    // d/dx G(x, y) = coeff(|x-y|^2) * (x - y)
    let pull = |x: ArrayView2<f64>, y: ArrayView2<f64>, weight: f64, out: &mut Array2<f64>| {
        for (i, xi) in x.rows().into_iter().enumerate() {
            let mut acc = out.row_mut(i);
            for yj in y.rows() {
                let c = weight * gaussian_mix_grad_coeff(sq_dist(xi, yj), sigmas);
                if c != 0.0 {
                    Zip::from(&mut acc)
                        .and(&xi)
                        .and(&yj)
                        .for_each(|o, &a, &b| *o += c * (a - b));
                }
            }
        }
    };
    let mut ds = Array2::zeros(s.raw_dim());
    pull(s, s, 2.0 / (m * m), &mut ds);
    pull(s, t, -2.0 / (m * n), &mut ds);
    let mut dt = Array2::zeros(t.raw_dim());
    pull(t, t, 2.0 / (n * n), &mut dt);
    pull(t, s, -2.0 / (m * n), &mut dt);
    (ds, dt)
}
