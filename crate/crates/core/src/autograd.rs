//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape in reverse. Nodes that do not depend on a trainable leaf are skipped.

use std::collections::HashMap;
use std::rc::Rc;

use crate::params::{ParamId, ParamStore};
use crate::spatial::LinearMap;
use crate::tensor::{gemm, Tensor};

/// Clamp bound for probabilities entering the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    BroadcastRows(Var),
    Transpose(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Rc<Vec<usize>>),
    Permute(Var, Rc<Vec<usize>>),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor, rstd: Vec<f64> },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Im2Col { x: Var, h: usize, w: usize, k: usize },
    Spatial(Var, Rc<LinearMap>),
    SumCols(Var),
    Mean(Var),
    BceMean(Var, Rc<Tensor>),
    MseMean(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, (Var, bool)>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that gradients are tracked for.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    /// Frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(v, _)) = self.params.get(&id) {
            return v;
        }
        let trainable = !store.is_frozen(id);
        let v = self.push(store.get(id).clone(), Op::Leaf, trainable);
        self.params.insert(id, (v, trainable));
        v
    }

    /// Gradients of every trainable parameter touched by this graph, ordered
    /// by parameter id. Parameters that received no gradient get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .filter(|(_, (_, trainable))| *trainable)
            .map(|(&id, &(v, _))| {
                let g = grads.wrt(v).cloned().unwrap_or_else(|| {
                    let (r, c) = self.value(v).shape();
                    Tensor::zeros(r, c)
                });
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// `a[m,n] + b[1,n]` with `b` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.rows(), 1, "add_row expects a row vector");
        assert_eq!(av.cols(), bv.cols(), "add_row column mismatch");
        let mut v = av.clone();
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(bv.data()) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::AddRow(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// Repeats a `1 × n` row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), 1, "broadcast_rows expects a row vector");
        let data = av.data().repeat(rows);
        let v = Tensor::from_vec(rows, av.cols(), data);
        let rg = self.rg(a);
        self.push(v, Op::BroadcastRows(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice_cols out of range");
        let mut v = Tensor::zeros(av.rows(), len);
        for r in 0..av.rows() {
            v.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(v, Op::SliceCols(a, start), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.rows(), "slice_rows out of range");
        let c = av.cols();
        let v = Tensor::from_vec(len, c, av.data()[start * c..(start + len) * c].to_vec());
        let rg = self.rg(a);
        self.push(v, Op::SliceRows(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut v = Tensor::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                v.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Row `i` of the output is row `index[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: Rc<Vec<usize>>) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            data.extend_from_slice(av.row(i));
        }
        let v = Tensor::from_vec(index.len(), c, data);
        let rg = self.rg(a);
        self.push(v, Op::GatherRows(a, index), rg)
    }

    /// Element `i` of the flattened output is element `perm[i]` of `a`.
    pub fn permute(&mut self, a: Var, perm: Rc<Vec<usize>>, rows: usize, cols: usize) -> Var {
        let av = self.value(a);
        assert_eq!(perm.len(), rows * cols, "permute length");
        let data = perm.iter().map(|&i| av.data()[i]).collect();
        let v = Tensor::from_vec(rows, cols, data);
        let rg = self.rg(a);
        self.push(v, Op::Permute(a, perm), rg)
    }

    /// Row-wise layer normalisation with affine `gain`/`bias` rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (m, n) = xv.shape();
        let mut xhat = Tensor::zeros(m, n);
        let mut rstd = Vec::with_capacity(m);
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(s);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
        }
        let (gv, bv) = (self.value(gain), self.value(bias));
        let mut y = xhat.clone();
        for r in 0..m {
            for ((o, g), b) in y.row_mut(r).iter_mut().zip(gv.data()).zip(bv.data()) {
                *o = *o * g + b;
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(y, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    /// Unfolds `k × k` zero-padded neighbourhoods of an `h × w` grid. Column
    /// layout is channel-major: `c·k² + ky·k + kx`.
    pub fn im2col(&mut self, x: Var, h: usize, w: usize, k: usize) -> Var {
        let v = im2col(self.value(x), h, w, k);
        let rg = self.rg(x);
        self.push(v, Op::Im2Col { x, h, w, k }, rg)
    }

    pub fn spatial(&mut self, x: Var, map: Rc<LinearMap>) -> Var {
        let v = map.apply(self.value(x));
        let rg = self.rg(x);
        self.push(v, Op::Spatial(x, map), rg)
    }

    /// `[m, n] -> [m, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| av.row(r).iter().sum()).collect();
        let v = Tensor::from_vec(av.rows(), 1, data);
        let rg = self.rg(a);
        self.push(v, Op::SumCols(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let v = Tensor::scalar(av.sum() / av.len() as f64);
        let rg = self.rg(a);
        self.push(v, Op::Mean(a), rg)
    }

    /// Mean binary cross-entropy of probabilities `s` against `target`, with
    /// `s` clamped to `[BCE_EPS, 1 - BCE_EPS]`. The clamp passes gradients
    /// straight through.
    pub fn bce_mean(&mut self, s: Var, target: Rc<Tensor>) -> Var {
        let sv = self.value(s);
        assert_eq!(sv.shape(), target.shape(), "bce shape mismatch");
        let total: f64 = sv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let v = Tensor::scalar(total / sv.len() as f64);
        let rg = self.rg(s);
        self.push(v, Op::BceMean(s, target), rg)
    }

    pub fn mse_mean(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mse shape mismatch");
        let total: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let v = Tensor::scalar(total / av.len() as f64);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MseMean(a, b), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Adds into an existing gradient slot, creating zeros first.
    fn slot<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> &'a mut Tensor {
        let (r, c) = self.value(v).shape();
        grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c))
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let slot = self.slot(grads, *a);
                    gemm(g, false, bv, true, slot, 1.0);
                }
                if self.rg(*b) {
                    let slot = self.slot(grads, *b);
                    gemm(av, true, g, false, slot, 1.0);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    self.accumulate(grads, *b, column_sums(g));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::BroadcastRows(a) => self.accumulate(grads, *a, column_sums(g)),
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::SliceCols(a, start) => {
                let len = g.cols();
                let slot = self.slot(grads, *a);
                for r in 0..g.rows() {
                    for (d, s) in slot.row_mut(r)[*start..*start + len].iter_mut().zip(g.row(r)) {
                        *d += s;
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let c = g.cols();
                let slot = self.slot(grads, *a);
                for (d, s) in slot.data_mut()[start * c..(start + g.rows()) * c].iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.rg(*p) {
                        let slot = self.slot(grads, *p);
                        for r in 0..g.rows() {
                            for (d, s) in slot.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *d += s;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if self.rg(*p) {
                        let part = Tensor::from_vec(rows, c, g.data()[off * c..(off + rows) * c].to_vec());
                        self.accumulate(grads, *p, part);
                    }
                    off += rows;
                }
            }
            Op::GatherRows(a, index) => {
                let slot = self.slot(grads, *a);
                for (o, &i) in index.iter().enumerate() {
                    for (d, s) in slot.row_mut(i).iter_mut().zip(g.row(o)) {
                        *d += s;
                    }
                }
            }
            Op::Permute(a, perm) => {
                let slot = self.slot(grads, *a);
                let data = slot.data_mut();
                for (o, &i) in perm.iter().enumerate() {
                    data[i] += g.data()[o];
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (m, n) = xhat.shape();
                if self.rg(*gain) {
                    let mut gg = Tensor::zeros(1, n);
                    for r in 0..m {
                        for ((d, gv), xv) in gg.data_mut().iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *d += gv * xv;
                        }
                    }
                    self.accumulate(grads, *gain, gg);
                }
                if self.rg(*bias) {
                    self.accumulate(grads, *bias, column_sums(g));
                }
                if self.rg(*x) {
                    let gain_v = self.value(*gain);
                    let mut gx = Tensor::zeros(m, n);
                    for (r, &rs) in rstd.iter().enumerate().take(m) {
                        let gxhat: Vec<f64> = g.row(r).iter().zip(gain_v.data()).map(|(a, b)| a * b).collect();
                        let mean_g = gxhat.iter().sum::<f64>() / n as f64;
                        let mean_gx = gxhat.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for ((o, gh), xh) in gx.row_mut(r).iter_mut().zip(&gxhat).zip(xhat.row(r)) {
                            *o = rs * (gh - mean_g - xh * mean_gx);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Gelu(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| gv * gelu_grad(x));
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y));
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Im2Col { x, h, w, k } => {
                let slot = self.slot(grads, *x);
                col2im_into(g, *h, *w, *k, slot);
            }
            Op::Spatial(x, map) => {
                let slot = self.slot(grads, *x);
                map.apply_transpose_into(g, slot);
            }
            Op::SumCols(a) => {
                let (m, n) = self.value(*a).shape();
                let mut ga = Tensor::zeros(m, n);
                for r in 0..m {
                    let gv = g.get(r, 0);
                    ga.row_mut(r).iter_mut().for_each(|v| *v = gv);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Mean(a) => {
                let (m, n) = self.value(*a).shape();
                let gv = g.item() / (m * n) as f64;
                self.accumulate(grads, *a, Tensor::full(m, n, gv));
            }
            Op::BceMean(s, target) => {
                let sv = self.value(*s);
                let scale = g.item() / sv.len() as f64;
                let gs = sv.zip_map(target, |p, t| {
                    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                    scale * (p - t) / (p * (1.0 - p))
                });
                self.accumulate(grads, *s, gs);
            }
            Op::MseMean(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let scale = 2.0 * g.item() / av.len() as f64;
                let diff = av.zip_map(bv, |x, y| scale * (x - y));
                if self.rg(*b) {
                    self.accumulate(grads, *b, diff.scale(-1.0));
                }
                self.accumulate(grads, *a, diff);
            }
        }
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (d, s) in out.data_mut().iter_mut().zip(g.row(r)) {
            *d += s;
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
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
    out
}

pub fn im2col(x: &Tensor, h: usize, w: usize, k: usize) -> Tensor {
    assert_eq!(x.rows(), h * w, "im2col grid size");
    let c = x.cols();
    let pad = (k / 2) as isize;
    let kk = k * k;
    let mut out = Tensor::zeros(h * w, c * kk);
    for y in 0..h {
        for xx in 0..w {
            let dst = out.row_mut(y * w + xx);
            for ky in 0..k {
                let sy = y as isize + ky as isize - pad;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - pad;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = x.row(sy as usize * w + sx as usize);
                    for (ch, v) in src.iter().enumerate() {
                        dst[ch * kk + ky * k + kx] = *v;
                    }
                }
            }
        }
    }
    out
}

fn col2im_into(g: &Tensor, h: usize, w: usize, k: usize, out: &mut Tensor) {
    let c = out.cols();
    let pad = (k / 2) as isize;
    let kk = k * k;
    for y in 0..h {
        for xx in 0..w {
            let src = g.row(y * w + xx);
            for ky in 0..k {
                let sy = y as isize + ky as isize - pad;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - pad;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = out.row_mut(sy as usize * w + sx as usize);
                    for ch in 0..c {
                        dst[ch] += src[ch * kk + ky * k + kx];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central differences of `f` with respect to every entry of `inputs`,
    /// compared to the tape gradient.
    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        let eval = |ins: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
            let out = f(&mut g, &vars);
            g.value(out).item()
        };
        let h = 1e-6;
        for (n, t) in inputs.iter().enumerate() {
            for i in 0..t.len() {
                let mut plus = inputs.clone();
                plus[n].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[n].data_mut()[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let analytic = grads.wrt(vars[n]).map_or(0.0, |g| g.data()[i]);
                let denom = numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(
                    (numeric - analytic).abs() / denom < 1e-5,
                    "input {n} entry {i}: numeric {numeric} analytic {analytic}"
                );
            }
        }
    }

    #[test]
    fn gradients_of_dense_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        let row = random(&mut rng, 1, 2);
        check(vec![a, b, row], |g, v| {
            let m = g.matmul(v[0], v[1]);
            let m = g.add_row(m, v[2]);
            let t = g.transpose(m);
            let s = g.softmax_rows(t);
            let sq = g.mul(s, s);
            let e = g.gelu(sq);
            g.mean(e)
        });
    }

    #[test]
    fn gradients_of_layer_norm_and_structure_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 4, 3);
        let gain = random(&mut rng, 1, 3);
        let bias = random(&mut rng, 1, 3);
        let t = random(&mut rng, 1, 2);
        check(vec![x, gain, bias, t], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]);
            let bt = g.broadcast_rows(v[3], 4);
            let c = g.concat_cols(&[y, bt]);
            let s = g.slice_cols(c, 1, 3);
            let r = g.concat_rows(&[s, s]);
            let r = g.slice_rows(r, 2, 5);
            let gathered = g.gather_rows(r, Rc::new(vec![4, 0, 0, 2]));
            let p = g.permute(gathered, Rc::new((0..12).rev().collect()), 6, 2);
            let sig = g.sigmoid(p);
            let summed = g.sum_cols(sig);
            let sc = g.scale(summed, 0.7);
            let d = g.sub(sc, summed);
            g.mean(d)
        });
    }

    #[test]
    fn gradients_of_conv_spatial_and_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 9, 2);
        let w = random(&mut rng, 18, 1);
        let target = Rc::new(Tensor::from_vec(36, 1, (0..36).map(|i| (i % 3 == 0) as u8 as f64).collect()));
        let other = random(&mut rng, 36, 1);
        check(vec![x, w, other], move |g, v| {
            let cols = g.im2col(v[0], 3, 3, 3);
            let logits = g.matmul(cols, v[1]);
            let up = g.spatial(logits, Rc::new(LinearMap::bilinear_upsample(3, 3, 2)));
            let s = g.sigmoid(up);
            let bce = g.bce_mean(s, target.clone());
            let mse = g.mse_mean(s, v[2]);
            let r = g.relu(v[2]);
            let rm = g.mean(r);
            let t = g.add(bce, mse);
            g.add(t, rm)
        });
    }

    #[test]
    fn im2col_k1_is_identity_and_padding_is_zero() {
        let x = Tensor::from_vec(4, 2, (0..8).map(|v| v as f64).collect());
        assert_eq!(im2col(&x, 2, 2, 1), x);
        let c = im2col(&x, 2, 2, 3);
        // Top-left cell: neighbours above/left are padding.
        assert_eq!(c.get(0, 0), 0.0);
        assert_eq!(c.get(0, 4), x.get(0, 0)); // centre tap, channel 0
        assert_eq!(c.get(0, 9 + 8), x.get(3, 1)); // bottom-right tap, channel 1
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let x = g.input(Tensor::scalar(3.0));
        let y = g.mul(c, x);
        let grads = g.backward(y);
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(x).unwrap().item(), 2.0);
    }
}
