//! The tape: every op appends a node whose inputs are earlier nodes, so a
//! reverse sweep over node indices is a valid topological order.

use super::{gemm, Layout, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Clamp applied to `log` inputs.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn positions(&self) -> usize {
        self.batch * self.oh * self.ow
    }
}

enum Op<T> {
    Leaf,
    Dense { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var, geom: ConvGeom, cols: Vec<T> },
    AddBias { x: Var, b: Var },
    Relu(Var),
    Exp(Var),
    Log(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Concat { a: Var, b: Var, na: usize, nb: usize },
    SqL2Distance(Var, Var),
    /// `floored` rows were divided by the constant eps instead of their norm.
    L2Normalize { x: Var, norms: Vec<T>, floored: Vec<bool> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<T>, probs: Vec<T> },
    PairwiseSqDist(Var),
    LogSumExpOffDiag { x: Var, weights: Vec<T> },
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode tape. Confined to one thread; build a fresh one per step.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map_or_else(|| vec![T::zero(); len], <[T]>::to_vec)
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is tracked.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable input; receives a gradient in [`Graph::backward`].
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// `x·w + b` with `b` broadcast over rows.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(shape_err("dense", xs, ws));
        }
        if bs != [ws[1]] {
            return Err(shape_err("dense bias", ws, bs));
        }
        let (rows, inp, out) = (xs[0], xs[1], ws[1]);
        let mut y = Vec::with_capacity(rows * out);
        for _ in 0..rows {
            y.extend_from_slice(self.data(b));
        }
        gemm(rows, inp, out, self.data(x), Layout::N, self.data(w), Layout::N, T::one(), &mut y);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::raw(vec![rows, out], y), Op::Dense { x, w, b }, rg))
    }

    /// Valid cross-correlation of NHWC `x` with an `[kh, kw, cin, cout]` kernel.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x), self.shape(k));
        if xs.len() != 4 || ks.len() != 4 || xs[3] != ks[2] {
            return Err(shape_err("conv2d", xs, ks));
        }
        if ks[0] > xs[1] || ks[1] > xs[2] {
            return Err(shape_err("conv2d kernel larger than input", xs, ks));
        }
        if stride == 0 {
            return Err(Error::validation("stride", "must be at least 1"));
        }
        let geom = ConvGeom {
            batch: xs[0],
            h: xs[1],
            w: xs[2],
            cin: xs[3],
            kh: ks[0],
            kw: ks[1],
            cout: ks[3],
            stride,
            oh: (xs[1] - ks[0]) / stride + 1,
            ow: (xs[2] - ks[1]) / stride + 1,
        };
        let cols = im2col(self.data(x), &geom);
        let mut y = vec![T::zero(); geom.positions() * geom.cout];
        gemm(
            geom.positions(),
            geom.patch(),
            geom.cout,
            &cols,
            Layout::N,
            self.data(k),
            Layout::N,
            T::zero(),
            &mut y,
        );
        let rg = self.rg(&[x, k]);
        let cols = if rg { cols } else { Vec::new() };
        let shape = vec![geom.batch, geom.oh, geom.ow, geom.cout];
        Ok(self.push(Tensor::raw(shape, y), Op::Conv2d { x, k, geom, cols }, rg))
    }

    /// Adds `b` along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.nodes[x.0].value.last_dim();
        if self.shape(b) != [d] {
            return Err(shape_err("add_bias", self.shape(x), self.shape(b)));
        }
        let bias = self.data(b);
        let y: Vec<T> = self
            .data(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(bias).map(|(&v, &c)| v + c))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, b]);
        Ok(self.push(Tensor::raw(shape, y), Op::AddBias { x, b }, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let y: Vec<T> = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::raw(shape, y), op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, T::exp, Op::Exp(x))
    }

    /// Natural log with the input clamped at [`LOG_EPS`]; negative inputs are a domain error.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.data(x).iter().find(|v| **v < T::zero()) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("negative input {v:?}"),
            });
        }
        let eps = T::from_f64c(LOG_EPS);
        Ok(self.unary(x, |v| v.max(eps).ln(), Op::Log(x)))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let y: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&u, &v)| f(u, v))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::raw(shape, y), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |u, v| u + v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |u, v| u - v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |u, v| u * v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64c(c);
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.data(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s: T = d.iter().copied().sum::<T>() / T::from_usize(d.len()).expect("len");
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Concatenates along the last axis; all leading dimensions must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(shape_err("concat", sa, sb));
        }
        let (na, nb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut shape = sa.to_vec();
        *shape.last_mut().expect("non-empty") = na + nb;
        let y: Vec<T> = self
            .data(a)
            .chunks(na)
            .zip(self.data(b).chunks(nb))
            .flat_map(|(ra, rb)| ra.iter().chain(rb).copied())
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::raw(shape, y), Op::Concat { a, b, na, nb }, rg))
    }

    /// Squared Euclidean distance reduced over the last axis.
    pub fn sq_l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("sq_l2_distance", self.shape(a), self.shape(b)));
        }
        let sa = self.shape(a);
        let d = sa[sa.len() - 1];
        let out_shape = if sa.len() == 1 { vec![1] } else { sa[..sa.len() - 1].to_vec() };
        let y: Vec<T> = self
            .data(a)
            .chunks(d)
            .zip(self.data(b).chunks(d))
            .map(|(ra, rb)| ra.iter().zip(rb).map(|(&u, &v)| (u - v) * (u - v)).sum())
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::raw(out_shape, y), Op::SqL2Distance(a, b), rg))
    }

    /// Scales each last-axis row to unit norm. Rows with norm below `eps` are a domain error.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let d = self.nodes[x.0].value.last_dim();
        let epst = T::from_f64c(eps);
        for (r, row) in self.data(x).chunks(d).enumerate() {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n < epst {
                return Err(Error::Domain {
                    op: "l2_normalize",
                    msg: format!("row {r} has norm {n:?} below epsilon (zero vector)"),
                });
            }
        }
        Ok(self.l2_normalize_floored(x, eps))
    }

    /// `x / max(‖x‖, eps)` per row. Never fails, so it is safe on rows a dead
    /// layer may have zeroed.
    pub fn l2_normalize_floored(&mut self, x: Var, eps: f64) -> Var {
        let d = self.nodes[x.0].value.last_dim();
        let eps = T::from_f64c(eps);
        let mut norms = Vec::new();
        let mut floored = Vec::new();
        let mut y = Vec::with_capacity(self.data(x).len());
        for row in self.data(x).chunks(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let den = if n < eps { eps } else { n };
            norms.push(den);
            floored.push(n < eps);
            y.extend(row.iter().map(|&v| v / den));
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::raw(shape, y), Op::L2Normalize { x, norms, floored }, rg)
    }

    /// Batch-mean of `-log softmax(logits)[label]`; `labels` is a one-hot `[B×C]` matrix.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &Tensor<T>) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.len() != 2 || ls != labels.shape() {
            return Err(shape_err("softmax_cross_entropy", ls, labels.shape()));
        }
        let c = ls[1];
        for (r, row) in labels.data().chunks(c).enumerate() {
            let ones = row.iter().filter(|&&v| v == T::one()).count();
            let zeros = row.iter().filter(|&&v| v == T::zero()).count();
            if ones != 1 || ones + zeros != c {
                return Err(Error::validation("labels", format!("row {r} is not one-hot")));
            }
        }
        let rows = ls[0];
        let mut probs = Vec::with_capacity(rows * c);
        let mut total = T::zero();
        for (row, lab) in self.data(logits).chunks(c).zip(labels.data().chunks(c)) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lz = z.ln();
            for (&v, &y) in row.iter().zip(lab) {
                probs.push((v - m).exp() / z);
                if y == T::one() {
                    total = total + lz - (v - m);
                }
            }
        }
        let loss = total / T::from_usize(rows).expect("rows");
        let rg = self.rg(&[logits]);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.data().to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// `[B×D] -> [B×B]` matrix of squared distances between rows.
    pub fn pairwise_sq_distances(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(shape_err("pairwise_sq_distances", s, &[0, 0]));
        }
        let (b, d) = (s[0], s[1]);
        let xd = self.data(x);
        let mut y = vec![T::zero(); b * b];
        for i in 0..b {
            for j in (i + 1)..b {
                let v: T = xd[i * d..(i + 1) * d]
                    .iter()
                    .zip(&xd[j * d..(j + 1) * d])
                    .map(|(&u, &w)| (u - w) * (u - w))
                    .sum();
                y[i * b + j] = v;
                y[j * b + i] = v;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::raw(vec![b, b], y), Op::PairwiseSqDist(x), rg))
    }

    /// `log Σ_{i≠j} exp(x_ij)` over a square matrix, stabilized by the off-diagonal max.
    pub fn logsumexp_off_diagonal(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != s[1] {
            return Err(shape_err("logsumexp_off_diagonal", s, &[s[0], s[0]]));
        }
        let b = s[0];
        if b < 2 {
            return Err(Error::validation("batch size", "need at least 2 rows for off-diagonal pairs"));
        }
        let xd = self.data(x);
        let off = |i: usize| i / b != i % b;
        let m = (0..b * b)
            .filter(|&i| off(i))
            .map(|i| xd[i])
            .fold(T::neg_infinity(), T::max);
        let mut weights: Vec<T> = (0..b * b)
            .map(|i| if off(i) { (xd[i] - m).exp() } else { T::zero() })
            .collect();
        let z: T = weights.iter().copied().sum();
        for w in &mut weights {
            *w = *w / z;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(m + z.ln()), Op::LogSumExpOffDiag { x, weights }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.nodes[x.0].value.clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Reverse sweep from a one-element `loss`, accumulating into every
    /// node that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.item().is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if self.nodes[v.0].requires_grad {
                let len = self.nodes[v.0].value.len();
                f(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let (rows, inp) = (self.shape(*x)[0], self.shape(*x)[1]);
                let out = self.shape(*w)[1];
                acc(*x, &mut |dx| gemm(rows, out, inp, g, Layout::N, self.data(*w), Layout::T, T::one(), dx));
                acc(*w, &mut |dw| gemm(inp, rows, out, self.data(*x), Layout::T, g, Layout::N, T::one(), dw));
                acc(*b, &mut |db| {
                    for row in g.chunks(out) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                });
            }
            Op::Conv2d { x, k, geom, cols } => {
                acc(*k, &mut |dk| {
                    gemm(geom.patch(), geom.positions(), geom.cout, cols, Layout::T, g, Layout::N, T::one(), dk)
                });
                acc(*x, &mut |dx| {
                    let mut dcols = vec![T::zero(); geom.positions() * geom.patch()];
                    gemm(
                        geom.positions(),
                        geom.cout,
                        geom.patch(),
                        g,
                        Layout::N,
                        self.data(*k),
                        Layout::T,
                        T::zero(),
                        &mut dcols,
                    );
                    col2im_add(&dcols, geom, dx);
                });
            }
            Op::AddBias { x, b } => {
                acc(*x, &mut |dx| add_into(dx, g));
                let d = self.shape(*b)[0];
                acc(*b, &mut |db| {
                    for row in g.chunks(d) {
                        add_into(db, row);
                    }
                });
            }
            Op::Relu(x) => acc(*x, &mut |dx| {
                for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(self.data(*x)) {
                    if xv > T::zero() {
                        *d = *d + gv;
                    }
                }
            }),
            Op::Exp(x) => acc(*x, &mut |dx| {
                for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(node.value.data()) {
                    *d = *d + gv * yv;
                }
            }),
            Op::Log(x) => {
                let eps = T::from_f64c(LOG_EPS);
                acc(*x, &mut |dx| {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(self.data(*x)) {
                        if xv > eps {
                            *d = *d + gv / xv;
                        }
                    }
                })
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| {
                    for (d, &v) in db.iter_mut().zip(g) {
                        *d = *d - v;
                    }
                });
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |da| {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(self.data(*b)) {
                        *d = *d + gv * bv;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(self.data(*a)) {
                        *d = *d + gv * av;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |dx| {
                for (d, &gv) in dx.iter_mut().zip(g) {
                    *d = *d + *c * gv;
                }
            }),
            Op::Sum(x) => acc(*x, &mut |dx| {
                for d in dx.iter_mut() {
                    *d = *d + g[0];
                }
            }),
            Op::Mean(x) => acc(*x, &mut |dx| {
                let s = g[0] / T::from_usize(dx.len()).expect("len");
                for d in dx.iter_mut() {
                    *d = *d + s;
                }
            }),
            Op::Concat { a, b, na, nb } => {
                let w = na + nb;
                acc(*a, &mut |da| {
                    for (d, row) in da.chunks_mut(*na).zip(g.chunks(w)) {
                        add_into(d, &row[..*na]);
                    }
                });
                acc(*b, &mut |db| {
                    for (d, row) in db.chunks_mut(*nb).zip(g.chunks(w)) {
                        add_into(d, &row[*na..]);
                    }
                });
            }
            Op::SqL2Distance(a, b) => {
                let d = self.nodes[a.0].value.last_dim();
                let two = T::from_f64c(2.0);
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |da| {
                    for (i, v) in da.iter_mut().enumerate() {
                        *v = *v + two * (ad[i] - bd[i]) * g[i / d];
                    }
                });
                acc(*b, &mut |db| {
                    for (i, v) in db.iter_mut().enumerate() {
                        *v = *v - two * (ad[i] - bd[i]) * g[i / d];
                    }
                });
            }
            Op::L2Normalize { x, norms, floored } => {
                let d = node.value.last_dim();
                acc(*x, &mut |dx| {
                    for (r, &n) in norms.iter().enumerate() {
                        let y = &node.value.data()[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: T = if floored[r] { T::zero() } else { y.iter().zip(gr).map(|(&a, &b)| a * b).sum() };
                        for j in 0..d {
                            dx[r * d + j] = dx[r * d + j] + (gr[j] - y[j] * dot) / n;
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let rows = self.shape(*logits)[0];
                let s = g[0] / T::from_usize(rows).expect("rows");
                acc(*logits, &mut |dl| {
                    for ((d, &p), &y) in dl.iter_mut().zip(probs).zip(labels) {
                        *d = *d + s * (p - y);
                    }
                });
            }
            Op::PairwiseSqDist(x) => {
                let (b, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let xd = self.data(*x);
                let two = T::from_f64c(2.0);
                acc(*x, &mut |dx| {
                    for i in 0..b {
                        for j in 0..b {
                            if i == j {
                                continue;
                            }
                            let c = two * (g[i * b + j] + g[j * b + i]);
                            if c == T::zero() {
                                continue;
                            }
                            for k in 0..d {
                                dx[i * d + k] = dx[i * d + k] + c * (xd[i * d + k] - xd[j * d + k]);
                            }
                        }
                    }
                });
            }
            Op::LogSumExpOffDiag { x, weights } => acc(*x, &mut |dx| {
                for (d, &w) in dx.iter_mut().zip(weights) {
                    *d = *d + g[0] * w;
                }
            }),
            Op::Reshape(x) => acc(*x, &mut |dx| add_into(dx, g)),
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let mut cols = Vec::with_capacity(g.positions() * g.patch());
    let run = g.kw * g.cin;
    for b in 0..g.batch {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                for ky in 0..g.kh {
                    let iy = oy * g.stride + ky;
                    let start = ((b * g.h + iy) * g.w + ox * g.stride) * g.cin;
                    cols.extend_from_slice(&x[start..start + run]);
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(dcols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let run = g.kw * g.cin;
    let mut r = 0;
    for b in 0..g.batch {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                for ky in 0..g.kh {
                    let iy = oy * g.stride + ky;
                    let start = ((b * g.h + iy) * g.w + ox * g.stride) * g.cin;
                    add_into(&mut dx[start..start + run], &dcols[r..r + run]);
                    r += run;
                }
            }
        }
    }
}

/// One-hot `[n × classes]` label matrix.
pub fn one_hot<T: Real>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::validation("label", format!("{l} out of range for {classes} classes")));
        }
        data[i * classes + l] = T::one();
    }
    Tensor::new([labels.len(), classes], data)
}
