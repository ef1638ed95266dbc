//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive appends one node to the tape; nodes only reference
//! earlier nodes, so the tape order is a topological order and the
//! backward sweep is a single reverse scan. Parameter nodes read their
//! values straight out of the borrowed [`ParamStore`] and deposit their
//! gradients into a caller-owned [`Gradients`] buffer.

use rand::Rng;

use crate::error::{Error, Result};

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows = 0,
    Cols = 1,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Mul(Var, Var),
    Scale(Var, f64),
    Concat {
        parts: Vec<Var>,
        axis: Axis,
    },
    Slice {
        x: Var,
        axis: Axis,
        start: usize,
    },
    Sigmoid(Var),
    Tanh(Var),
    Softmax {
        x: Var,
        axis: Axis,
    },
    Max {
        x: Var,
        axis: Axis,
        argmax: Vec<usize>,
    },
    Mean {
        x: Var,
        axis: Axis,
        mask: Option<Vec<bool>>,
        counts: Vec<usize>,
    },
    Sum {
        x: Var,
        axis: Axis,
    },
    Dropout {
        x: Var,
        keep: Vec<f64>,
    },
    Bce {
        x: Var,
        target: Vec<f64>,
        literal: bool,
    },
    GatherMean {
        table: Var,
        groups: Vec<Vec<usize>>,
    },
    Map {
        x: Var,
        df: fn(f64) -> f64,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn check_mask(op: &'static str, mask: Option<&[bool]>, len: usize) -> Result<()> {
    if let Some(m) = mask {
        if m.len() != len {
            return Err(Error::shape(
                op,
                format!("mask of length {} for axis of {len}", m.len()),
            ));
        }
        if !m.iter().any(|&k| k) {
            return Err(Error::AllMasked { op });
        }
    }
    Ok(())
}

fn kept(mask: Option<&[bool]>, i: usize) -> bool {
    mask.is_none_or(|m| m[i])
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.get(*id),
            _ => self.nodes[v.0].value.as_ref().expect("node value"),
        }
    }

    /// Argmax indices recorded by [`Graph::masked_max`].
    pub fn argmax(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::Max { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (av.dims2(), bv.dims2());
        if k != k2 {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for (o, &bpj) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += aip * bpj;
                }
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((m, k), (n, k2)) = (av.dims2(), bv.dims2());
        if k != k2 {
            return Err(Error::shape(
                "matmul_bt",
                format!("{:?} x {:?}ᵀ", av.shape(), bv.shape()),
            ));
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let arow = av.row(i);
            for j in 0..n {
                out.push(dot(arow, bv.row(j)));
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMulBt(a, b), &[a, b]))
    }

    /// Elementwise sum. `b` may also be a single row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let broadcast = if av.dims2() == bv.dims2() {
            false
        } else if bv.numel() == av.cols() && bv.rows() == 1 {
            true
        } else {
            return Err(Error::shape("add", format!("{:?} + {:?}", av.shape(), bv.shape())));
        };
        let c = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + if broadcast { bv.data()[i % c] } else { bv.data()[i] })
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add { a, b, broadcast }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dims2() != bv.dims2() {
            return Err(Error::shape("mul", format!("{:?} * {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v * c).collect()).expect("same shape");
        self.push(t, Op::Scale(x, c), &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.value(p).dims2()).collect();
        let t = match axis {
            Axis::Rows => {
                let cols = dims[0].1;
                if dims.iter().any(|d| d.1 != cols) {
                    return Err(Error::shape("concat", format!("row concat of {dims:?}")));
                }
                let mut data = Vec::with_capacity(dims.iter().map(|d| d.0 * d.1).sum());
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::matrix(data.len() / cols, cols, data)?
            }
            Axis::Cols => {
                let rows = dims[0].0;
                if dims.iter().any(|d| d.0 != rows) {
                    return Err(Error::shape("concat", format!("column concat of {dims:?}")));
                }
                let cols: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(r));
                    }
                }
                Tensor::matrix(rows, cols, data)?
            }
        };
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        let extent = if axis == Axis::Rows { r } else { c };
        if len == 0 || start + len > extent {
            return Err(Error::shape(
                "slice",
                format!("{start}..{} of axis {axis:?} with extent {extent}", start + len),
            ));
        }
        let t = match axis {
            Axis::Rows => Tensor::matrix(len, c, xv.data()[start * c..(start + len) * c].to_vec())?,
            Axis::Cols => {
                let mut data = Vec::with_capacity(r * len);
                for i in 0..r {
                    data.extend_from_slice(&xv.row(i)[start..start + len]);
                }
                Tensor::matrix(r, len, data)?
            }
        };
        Ok(self.push(t, Op::Slice { x, axis, start }, &[x]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect()).expect("same shape");
        self.push(t, op, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// Elementwise `f` with a caller-supplied derivative `df` (evaluated at the input).
    pub fn map(&mut self, x: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var {
        self.unary(x, f, Op::Map { x, df })
    }

    /// Softmax along `axis`; masked positions get probability zero.
    pub fn softmax(&mut self, x: Var, axis: Axis, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        let (outer, inner) = if axis == Axis::Cols { (r, c) } else { (c, r) };
        check_mask("softmax", mask, inner)?;
        let idx = |o: usize, i: usize| if axis == Axis::Cols { o * c + i } else { i * c + o };
        let mut out = vec![0.0; r * c];
        for o in 0..outer {
            let mx = (0..inner)
                .filter(|&i| kept(mask, i))
                .map(|i| xv.data()[idx(o, i)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in (0..inner).filter(|&i| kept(mask, i)) {
                let e = (xv.data()[idx(o, i)] - mx).exp();
                out[idx(o, i)] = e;
                z += e;
            }
            for i in (0..inner).filter(|&i| kept(mask, i)) {
                out[idx(o, i)] /= z;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax { x, axis }, &[x]))
    }

    /// Max along `axis` over unmasked positions. Ties resolve to the first index.
    pub fn masked_max(&mut self, x: Var, axis: Axis, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        let (outer, inner) = if axis == Axis::Cols { (r, c) } else { (c, r) };
        check_mask("masked_max", mask, inner)?;
        let idx = |o: usize, i: usize| if axis == Axis::Cols { o * c + i } else { i * c + o };
        let mut values = Vec::with_capacity(outer);
        let mut argmax = Vec::with_capacity(outer);
        for o in 0..outer {
            let mut best: Option<(usize, f64)> = None;
            for i in (0..inner).filter(|&i| kept(mask, i)) {
                let v = xv.data()[idx(o, i)];
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
            let (i, v) = best.expect("mask checked");
            values.push(v);
            argmax.push(i);
        }
        let t = Tensor::vector(values);
        Ok(self.push(t, Op::Max { x, axis, argmax }, &[x]))
    }

    /// Mean along `axis` over unmasked positions.
    pub fn masked_mean(&mut self, x: Var, axis: Axis, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        let (outer, inner) = if axis == Axis::Cols { (r, c) } else { (c, r) };
        check_mask("masked_mean", mask, inner)?;
        let idx = |o: usize, i: usize| if axis == Axis::Cols { o * c + i } else { i * c + o };
        let n = (0..inner).filter(|&i| kept(mask, i)).count();
        let values = (0..outer)
            .map(|o| {
                let mut s = 0.0;
                for i in (0..inner).filter(|&i| kept(mask, i)) {
                    s += xv.data()[idx(o, i)];
                }
                s / n as f64
            })
            .collect();
        let t = Tensor::vector(values);
        Ok(self.push(
            t,
            Op::Mean {
                x,
                axis,
                mask: mask.map(<[bool]>::to_vec),
                counts: vec![n],
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var, axis: Axis) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        let values = match axis {
            Axis::Cols => (0..r).map(|i| xv.row(i).iter().sum()).collect(),
            Axis::Rows => {
                let mut v = vec![0.0; c];
                for i in 0..r {
                    for (s, x) in v.iter_mut().zip(xv.row(i)) {
                        *s += x;
                    }
                }
                v
            }
        };
        self.push(Tensor::vector(values), Op::Sum { x, axis }, &[x])
    }

    /// Inverted dropout: identity unless `train`, otherwise zeroes each value
    /// with probability `rate` and rescales survivors by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Var {
        if !train || rate <= 0.0 {
            return x;
        }
        let xv = self.value(x);
        let scale = 1.0 / (1.0 - rate);
        let keep: Vec<f64> = (0..xv.numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let data = xv.data().iter().zip(&keep).map(|(v, k)| v * k).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Dropout { x, keep }, &[x])
    }

    /// Mean over all entries of the one-versus-all logistic loss.
    ///
    /// With `literal` set, uses `-(1/n) Σ y σ(x) + (1-y) σ(-x)` instead of
    /// the log-sigmoid form; only for comparison runs.
    pub fn bce_with_logits(&mut self, x: Var, target: &[f64], literal: bool) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() != target.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits vs {} targets", xv.numel(), target.len()),
            ));
        }
        let n = target.len() as f64;
        let total: f64 = xv
            .data()
            .iter()
            .zip(target)
            .map(|(&x, &y)| {
                if literal {
                    -(y * sigmoid(x) + (1.0 - y) * sigmoid(-x))
                } else {
                    y * softplus(-x) + (1.0 - y) * softplus(x)
                }
            })
            .sum();
        let t = Tensor::scalar(total / n);
        Ok(self.push(
            t,
            Op::Bce {
                x,
                target: target.to_vec(),
                literal,
            },
            &[x],
        ))
    }

    /// Row `i` of the result is the mean of `table` rows `groups[i]` (zero for an empty group).
    pub fn gather_mean(&mut self, table: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let tv = self.value(table);
        let (r, c) = tv.dims2();
        if groups.is_empty() {
            return Err(Error::shape("gather_mean", "no groups"));
        }
        let mut out = vec![0.0; groups.len() * c];
        for (g, rows) in groups.iter().enumerate() {
            if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
                return Err(Error::shape("gather_mean", format!("row {bad} of {r}")));
            }
            if rows.is_empty() {
                continue;
            }
            let dst = &mut out[g * c..(g + 1) * c];
            for &i in rows {
                for (d, s) in dst.iter_mut().zip(tv.row(i)) {
                    *d += s;
                }
            }
            let k = rows.len() as f64;
            dst.iter_mut().for_each(|d| *d /= k);
        }
        let t = Tensor::matrix(groups.len(), c, out)?;
        Ok(self.push(
            t,
            Op::GatherMean {
                table,
                groups: groups.to_vec(),
            },
            &[table],
        ))
    }

    /// Accumulates `d loss / d param` into `grads`.
    pub fn backward(&self, loss: Var, grads: &mut Gradients) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !grads.matches(self.params) {
            return Err(Error::shape("backward", "gradient buffers do not match parameters"));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for n in (0..=loss.0).rev() {
            let Some(g) = adj[n].take() else { continue };
            let node = &self.nodes[n];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(n, &node.op, &g, &mut adj, grads);
        }
        Ok(())
    }

    fn backward_node(&self, n: usize, op: &Op, g: &[f64], adj: &mut [Option<Vec<f64>>], grads: &mut Gradients) {
        let out = || self.nodes[n].value.as_ref().expect("op value");
        match op {
            Op::Leaf => {}
            Op::Param(id) => {
                for (d, s) in grads.get_mut(*id).iter_mut().zip(g) {
                    *d += s;
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ((m, k), (_, nn)) = (av.dims2(), bv.dims2());
                if self.needs(*a) {
                    // dA = G · Bᵀ
                    let da = self.adj_mut(adj, *a);
                    for i in 0..m {
                        let grow = &g[i * nn..(i + 1) * nn];
                        for p in 0..k {
                            da[i * k + p] += dot(grow, bv.row(p));
                        }
                    }
                }
                if self.needs(*b) {
                    // dB = Aᵀ · G
                    let db = self.adj_mut(adj, *b);
                    for i in 0..m {
                        let grow = &g[i * nn..(i + 1) * nn];
                        for p in 0..k {
                            let aip = av.data()[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (d, gv) in db[p * nn..(p + 1) * nn].iter_mut().zip(grow) {
                                *d += aip * gv;
                            }
                        }
                    }
                }
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ((m, k), (nn, _)) = (av.dims2(), bv.dims2());
                if self.needs(*a) {
                    // dA = G · B
                    let da = self.adj_mut(adj, *a);
                    for i in 0..m {
                        for j in 0..nn {
                            let gij = g[i * nn + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for (d, bv) in da[i * k..(i + 1) * k].iter_mut().zip(bv.row(j)) {
                                *d += gij * bv;
                            }
                        }
                    }
                }
                if self.needs(*b) {
                    // dB = Gᵀ · A
                    let db = self.adj_mut(adj, *b);
                    for i in 0..m {
                        for j in 0..nn {
                            let gij = g[i * nn + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for (d, av) in db[j * k..(j + 1) * k].iter_mut().zip(av.row(i)) {
                                *d += gij * av;
                            }
                        }
                    }
                }
            }
            Op::Add { a, b, broadcast } => {
                if self.needs(*a) {
                    add_into(self.adj_mut(adj, *a), g);
                }
                if self.needs(*b) {
                    let db = self.adj_mut(adj, *b);
                    if *broadcast {
                        let c = db.len();
                        for (i, gv) in g.iter().enumerate() {
                            db[i % c] += gv;
                        }
                    } else {
                        add_into(db, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    let da = self.adj_mut(adj, *a);
                    for ((d, gv), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    let db = self.adj_mut(adj, *b);
                    for ((d, gv), x) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.needs(*x) {
                    for (d, gv) in self.adj_mut(adj, *x).iter_mut().zip(g) {
                        *d += c * gv;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let cols = out().cols();
                match axis {
                    Axis::Rows => {
                        let mut offset = 0;
                        for &p in parts {
                            let len = self.value(p).numel();
                            if self.needs(p) {
                                add_into(self.adj_mut(adj, p), &g[offset..offset + len]);
                            }
                            offset += len;
                        }
                    }
                    Axis::Cols => {
                        let mut col0 = 0;
                        for &p in parts {
                            let (pr, pc) = self.value(p).dims2();
                            if self.needs(p) {
                                let dp = self.adj_mut(adj, p);
                                for r in 0..pr {
                                    add_into(&mut dp[r * pc..(r + 1) * pc], &g[r * cols + col0..r * cols + col0 + pc]);
                                }
                            }
                            col0 += pc;
                        }
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                if self.needs(*x) {
                    let (or, oc) = out().dims2();
                    let xc = self.value(*x).cols();
                    let dx = self.adj_mut(adj, *x);
                    match axis {
                        Axis::Rows => add_into(&mut dx[start * xc..(start + or) * xc], g),
                        Axis::Cols => {
                            for r in 0..or {
                                add_into(&mut dx[r * xc + start..r * xc + start + oc], &g[r * oc..(r + 1) * oc]);
                            }
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if self.needs(*x) {
                    let y = out().data();
                    for ((d, gv), s) in self.adj_mut(adj, *x).iter_mut().zip(g).zip(y) {
                        *d += gv * s * (1.0 - s);
                    }
                }
            }
            Op::Tanh(x) => {
                if self.needs(*x) {
                    let y = out().data();
                    for ((d, gv), t) in self.adj_mut(adj, *x).iter_mut().zip(g).zip(y) {
                        *d += gv * (1.0 - t * t);
                    }
                }
            }
            Op::Map { x, df } => {
                if self.needs(*x) {
                    let xv = self.value(*x).data();
                    for ((d, gv), v) in self.adj_mut(adj, *x).iter_mut().zip(g).zip(xv) {
                        *d += gv * df(*v);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if self.needs(*x) {
                    let y = out();
                    let (r, c) = y.dims2();
                    let (outer, inner) = if *axis == Axis::Cols { (r, c) } else { (c, r) };
                    let idx = |o: usize, i: usize| if *axis == Axis::Cols { o * c + i } else { i * c + o };
                    let yd = y.data();
                    let dx = self.adj_mut(adj, *x);
                    for o in 0..outer {
                        let s: f64 = (0..inner).map(|i| g[idx(o, i)] * yd[idx(o, i)]).sum();
                        for i in 0..inner {
                            let k = idx(o, i);
                            dx[k] += yd[k] * (g[k] - s);
                        }
                    }
                }
            }
            Op::Max { x, axis, argmax } => {
                if self.needs(*x) {
                    let c = self.value(*x).cols();
                    let dx = self.adj_mut(adj, *x);
                    for (o, &i) in argmax.iter().enumerate() {
                        let k = if *axis == Axis::Cols { o * c + i } else { i * c + o };
                        dx[k] += g[o];
                    }
                }
            }
            Op::Mean { x, axis, mask, counts } => {
                if self.needs(*x) {
                    let (r, c) = self.value(*x).dims2();
                    let n = counts[0] as f64;
                    let dx = self.adj_mut(adj, *x);
                    for i in 0..r {
                        for j in 0..c {
                            let (o, pos) = if *axis == Axis::Cols { (i, j) } else { (j, i) };
                            if kept(mask.as_deref(), pos) {
                                dx[i * c + j] += g[o] / n;
                            }
                        }
                    }
                }
            }
            Op::Sum { x, axis } => {
                if self.needs(*x) {
                    let (r, c) = self.value(*x).dims2();
                    let dx = self.adj_mut(adj, *x);
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += if *axis == Axis::Cols { g[i] } else { g[j] };
                        }
                    }
                }
            }
            Op::Dropout { x, keep } => {
                if self.needs(*x) {
                    for ((d, gv), k) in self.adj_mut(adj, *x).iter_mut().zip(g).zip(keep) {
                        *d += gv * k;
                    }
                }
            }
            Op::Bce { x, target, literal } => {
                if self.needs(*x) {
                    let xv = self.value(*x).data();
                    let n = target.len() as f64;
                    let dx = self.adj_mut(adj, *x);
                    for ((d, &xi), &y) in dx.iter_mut().zip(xv).zip(target) {
                        let s = sigmoid(xi);
                        let local = if *literal {
                            -(2.0 * y - 1.0) * s * (1.0 - s)
                        } else {
                            s - y
                        };
                        *d += g[0] * local / n;
                    }
                }
            }
            Op::GatherMean { table, groups } => {
                if self.needs(*table) {
                    let c = self.value(*table).cols();
                    let dt = self.adj_mut(adj, *table);
                    for (gi, rows) in groups.iter().enumerate() {
                        let k = rows.len() as f64;
                        for &i in rows {
                            for j in 0..c {
                                dt[i * c + j] += g[gi * c + j] / k;
                            }
                        }
                    }
                }
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn adj_mut<'a>(&self, adj: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut Vec<f64> {
        let n = self.value(v).numel();
        adj[v.0].get_or_insert_with(|| vec![0.0; n])
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
