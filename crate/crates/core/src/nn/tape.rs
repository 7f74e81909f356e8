//! Reverse-mode tape over dense matrices.
//!
//! Every operation appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients into a
//! [`Gradients`] aligned with the parameter store the tape was built against.

use crate::error::{Error, Result};
use crate::nn::params::{Gradients, ParamId, ParamStore};
use crate::numkernel::{gemm, RealMatrix};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Gather(Var, Vec<Option<usize>>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: RealMatrix, inv_std: Vec<f64> },
    Softmax(Var),
    RowDot(Var, Var),
    L1 { pred: Var, target: RealMatrix },
    InfoNce { scores: Var, group: usize, probs: RealMatrix },
    Sum(Var),
}

struct Node {
    value: RealMatrix,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    consumed: bool,
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_vars: vec![None; store.len()], consumed: false }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: RealMatrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &RealMatrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn constant(&mut self, value: RealMatrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Parameter leaf; repeated requests return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param(id.index()));
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        self.push(value, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise product shapes");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = RealMatrix::from_vec(x.rows(), x.cols(), data);
        self.push(value, Op::Mul(a, b))
    }

    /// Adds the `1 × cols` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (x, r) = (self.value(a), self.value(b));
        assert_eq!((1, x.cols()), r.shape(), "broadcast row shape");
        let mut value = x.clone();
        for i in 0..value.rows() {
            for (v, bias) in value.row_mut(i).iter_mut().zip(r.data()) {
                *v += bias;
            }
        }
        self.push(value, Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    /// Row `i` of the result is row `idx[i]` of `a`, or zeros for `None`.
    pub fn gather(&mut self, a: Var, idx: Vec<Option<usize>>) -> Var {
        let src = self.value(a);
        let cols = src.cols();
        let mut data = vec![0.0; idx.len() * cols];
        for (i, r) in idx.iter().enumerate() {
            if let Some(r) = r {
                data[i * cols..(i + 1) * cols].copy_from_slice(src.row(*r));
            }
        }
        let value = RealMatrix::from_vec(idx.len(), cols, data);
        self.push(value, Op::Gather(a, idx))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        self.gather(a, idx.iter().map(|&i| Some(i)).collect())
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let mats: Vec<&RealMatrix> = parts.iter().map(|v| self.value(*v)).collect();
        let value = RealMatrix::vstack(&mats).expect("concat_rows column mismatch");
        self.push(value, Op::ConcatRows(parts))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let mats: Vec<&RealMatrix> = parts.iter().map(|v| self.value(*v)).collect();
        let value = RealMatrix::hstack(&mats).expect("concat_cols row mismatch");
        self.push(value, Op::ConcatCols(parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let value = self.value(a).slice_cols(start, width);
        self.push(value, Op::SliceCols(a, start))
    }

    /// Row-wise layer normalization with learned `1 × cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let src = self.value(x);
        let (rows, cols) = src.shape();
        let mut xhat = RealMatrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let r = src.row(i);
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (o, v) in xhat.row_mut(i).iter_mut().zip(r) {
                *o = (v - mean) * is;
            }
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut value = xhat.clone();
        for i in 0..rows {
            for ((v, gj), bj) in value.row_mut(i).iter_mut().zip(g.data()).zip(b.data()) {
                *v = *v * gj + bj;
            }
        }
        self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked
    /// to probability zero.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Var {
        let src = self.value(a);
        let (rows, cols) = src.shape();
        let mut value = RealMatrix::zeros(rows, cols);
        for i in 0..rows {
            let live = if causal { (i + 1).min(cols) } else { cols };
            let r = &src.row(i)[..live];
            let max = r.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            let out = value.row_mut(i);
            let mut z = 0.0;
            for j in 0..live {
                out[j] = (r[j] - max).exp();
                z += out[j];
            }
            for v in &mut out[..live] {
                *v /= z;
            }
        }
        self.push(value, Op::Softmax(a))
    }

    /// `n × 1` column of row-wise dot products.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "row_dot shapes");
        let data = (0..x.rows()).map(|i| x.row(i).iter().zip(y.row(i)).map(|(p, q)| p * q).sum()).collect();
        let value = RealMatrix::from_vec(x.rows(), 1, data);
        self.push(value, Op::RowDot(a, b))
    }

    /// Mean absolute error against a constant target, as a `1 × 1` node.
    pub fn l1_loss(&mut self, pred: Var, target: RealMatrix) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "l1 target shape");
        let n = p.data().len().max(1) as f64;
        let total: f64 = p.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum();
        self.push(RealMatrix::from_vec(1, 1, vec![total / n]), Op::L1 { pred, target })
    }

    /// InfoNCE over consecutive groups of `group` scores (an `n × 1` column)
    /// whose first entry is the positive. Returns the mean of
    /// `-log softmax(group)[0]` as a `1 × 1` node.
    pub fn info_nce(&mut self, scores: Var, group: usize) -> Var {
        let s = self.value(scores);
        assert_eq!(s.cols(), 1, "scores must be a column");
        assert!(group >= 1 && s.rows().is_multiple_of(group), "scores not divisible into groups");
        let groups = s.rows() / group;
        let mut probs = RealMatrix::zeros(s.rows(), 1);
        let mut total = 0.0;
        for g in 0..groups {
            let block = &s.data()[g * group..(g + 1) * group];
            let max = block.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            let z: f64 = block.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - block[0];
            for (j, v) in block.iter().enumerate() {
                probs.data_mut()[g * group + j] = (v - lse).exp();
            }
        }
        let value = RealMatrix::from_vec(1, 1, vec![total / groups.max(1) as f64]);
        self.push(value, Op::InfoNce { scores, group, probs })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        self.push(RealMatrix::from_vec(1, 1, vec![total]), Op::Sum(a))
    }

    /// Backpropagates from a `1 × 1` node. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Contract("tape already consumed by a previous backward pass".into()));
        }
        self.consumed = true;
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Shape(format!("loss must be 1x1, got {:?}", lv.shape())));
        }
        if !lv[(0, 0)].is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {}", lv[(0, 0)])));
        }

        let mut grads: Vec<Option<RealMatrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(RealMatrix::from_vec(1, 1, vec![1.0]));
        let mut out = self.store.zero_grads();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => out.tensors[*p].add_assign(&g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    gemm(1.0, &g, false, bv, true, 1.0, slot(&mut grads, *a, av));
                    gemm(1.0, av, true, &g, false, 1.0, slot(&mut grads, *b, bv));
                }
                Op::MatMulNT(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    gemm(1.0, &g, false, bv, false, 1.0, slot(&mut grads, *a, av));
                    gemm(1.0, &g, true, av, false, 1.0, slot(&mut grads, *b, bv));
                }
                Op::Add(a, b) => {
                    slot(&mut grads, *a, val(*a)).add_assign(&g);
                    slot(&mut grads, *b, val(*b)).add_assign(&g);
                }
                Op::Sub(a, b) => {
                    slot(&mut grads, *a, val(*a)).add_assign(&g);
                    axpy(slot(&mut grads, *b, val(*b)), -1.0, &g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    for (s, (gi, bi)) in
                        slot(&mut grads, *a, av).data_mut().iter_mut().zip(g.data().iter().zip(bv.data()))
                    {
                        *s += gi * bi;
                    }
                    for (s, (gi, ai)) in
                        slot(&mut grads, *b, bv).data_mut().iter_mut().zip(g.data().iter().zip(av.data()))
                    {
                        *s += gi * ai;
                    }
                }
                Op::AddRow(a, b) => {
                    slot(&mut grads, *a, val(*a)).add_assign(&g);
                    let gb = slot(&mut grads, *b, val(*b));
                    for r in 0..g.rows() {
                        for (s, x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                }
                Op::Scale(a, c) => axpy(slot(&mut grads, *a, val(*a)), *c, &g),
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = slot(&mut grads, *a, val(*a));
                    for ((s, gi), yi) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *s += gi * yi * (1.0 - yi);
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = slot(&mut grads, *a, val(*a));
                    for ((s, gi), yi) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *s += gi * (1.0 - yi * yi);
                    }
                }
                Op::Relu(a) => {
                    let y = &node.value;
                    let ga = slot(&mut grads, *a, val(*a));
                    for ((s, gi), yi) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        if *yi > 0.0 {
                            *s += gi;
                        }
                    }
                }
                Op::Gather(a, idx) => {
                    let ga = slot(&mut grads, *a, val(*a));
                    for (r, src) in idx.iter().enumerate() {
                        if let Some(src) = src {
                            for (s, x) in ga.row_mut(*src).iter_mut().zip(g.row(r)) {
                                *s += x;
                            }
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let pv = val(*p);
                        let n = pv.rows() * pv.cols();
                        let gp = slot(&mut grads, *p, pv);
                        for (s, x) in gp.data_mut().iter_mut().zip(&g.data()[start..start + n]) {
                            *s += x;
                        }
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let pv = val(*p);
                        let w = pv.cols();
                        let gp = slot(&mut grads, *p, pv);
                        for r in 0..g.rows() {
                            for (s, x) in gp.row_mut(r).iter_mut().zip(&g.row(r)[col..col + w]) {
                                *s += x;
                            }
                        }
                        col += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let w = g.cols();
                    let ga = slot(&mut grads, *a, val(*a));
                    for r in 0..g.rows() {
                        for (s, x) in ga.row_mut(r)[*start..*start + w].iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let gv = val(*gain).clone();
                    let n = xhat.cols() as f64;
                    {
                        let gg = slot(&mut grads, *gain, val(*gain));
                        for r in 0..g.rows() {
                            for ((s, gi), xh) in gg.data_mut().iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                                *s += gi * xh;
                            }
                        }
                    }
                    {
                        let gb = slot(&mut grads, *bias, val(*bias));
                        for r in 0..g.rows() {
                            for (s, gi) in gb.data_mut().iter_mut().zip(g.row(r)) {
                                *s += gi;
                            }
                        }
                    }
                    let gx = slot(&mut grads, *x, val(*x));
                    let mut dxhat = vec![0.0; xhat.cols()];
                    for r in 0..g.rows() {
                        for ((d, gi), gj) in dxhat.iter_mut().zip(g.row(r)).zip(gv.data()) {
                            *d = gi * gj;
                        }
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xhat.row(r)).map(|(d, xh)| d * xh).sum();
                        let is = inv_std[r];
                        for ((s, d), xh) in gx.row_mut(r).iter_mut().zip(&dxhat).zip(xhat.row(r)) {
                            *s += is / n * (n * d - sum_d - xh * sum_dx);
                        }
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let ga = slot(&mut grads, *a, val(*a));
                    for r in 0..g.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(gi, yi)| gi * yi).sum();
                        for ((s, gi), yi) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *s += yi * (gi - dot);
                        }
                    }
                }
                Op::RowDot(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    {
                        let ga = slot(&mut grads, *a, av);
                        for r in 0..g.rows() {
                            let gr = g[(r, 0)];
                            for (s, x) in ga.row_mut(r).iter_mut().zip(bv.row(r)) {
                                *s += gr * x;
                            }
                        }
                    }
                    let gb = slot(&mut grads, *b, bv);
                    for r in 0..g.rows() {
                        let gr = g[(r, 0)];
                        for (s, x) in gb.row_mut(r).iter_mut().zip(av.row(r)) {
                            *s += gr * x;
                        }
                    }
                }
                Op::L1 { pred, target } => {
                    let pv = val(*pred);
                    let scale = g[(0, 0)] / pv.data().len().max(1) as f64;
                    let gp = slot(&mut grads, *pred, pv);
                    for ((s, p), t) in gp.data_mut().iter_mut().zip(pv.data()).zip(target.data()) {
                        let d = p - t;
                        if d > 0.0 {
                            *s += scale;
                        } else if d < 0.0 {
                            *s -= scale;
                        }
                    }
                }
                Op::InfoNce { scores, group, probs } => {
                    let groups = probs.rows() / group;
                    let scale = g[(0, 0)] / groups.max(1) as f64;
                    let gs = slot(&mut grads, *scores, val(*scores));
                    for (j, (s, p)) in gs.data_mut().iter_mut().zip(probs.data()).enumerate() {
                        let onehot = if j % group == 0 { 1.0 } else { 0.0 };
                        *s += scale * (p - onehot);
                    }
                }
                Op::Sum(a) => {
                    let c = g[(0, 0)];
                    for s in slot(&mut grads, *a, val(*a)).data_mut() {
                        *s += c;
                    }
                }
            }
        }
        Ok(out)
    }
}

fn slot<'g>(grads: &'g mut [Option<RealMatrix>], v: Var, like: &RealMatrix) -> &'g mut RealMatrix {
    grads[v.0].get_or_insert_with(|| RealMatrix::zeros(like.rows(), like.cols()))
}

fn axpy(y: &mut RealMatrix, a: f64, x: &RealMatrix) {
    for (s, v) in y.data_mut().iter_mut().zip(x.data()) {
        *s += a * v;
    }
}
