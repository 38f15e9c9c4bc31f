//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its value and the ids of its
//! inputs. [`Tape::backward`] walks the nodes in reverse and accumulates
//! adjoints. [`Tape::detach`] copies a value into a node that stops
//! gradient flow.

use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, Tensor};

/// Floor applied to probabilities inside every logarithm.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Detach,
    Linear { x: Var, w: Var, b: Var },
    MatMul { a: Var, b: Var },
    Tanh(Var),
    Relu(Var),
    Conv3x3 { x: Var, w: Var, b: Var },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    MeanSquare(Var),
    Softmax(Var),
    CrossEntropy { p: Var, labels: Vec<usize> },
    Kl { p: Var, q: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints for every node up to the differentiated output.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    dims: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient w.r.t. `v`; all-zero when `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.dims[v.0]),
        }
    }
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{what}: {a:?} vs {b:?}"))
}

impl Tape {
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

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push(value, Op::Detach)
    }

    /// `x · wᵀ + b` with `x` batch×in, `w` out×in, `b` out.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (batch, fin) = (xv.rows(), xv.cols());
        if wv.dims().len() != 2 || wv.dims()[1] != fin || bv.len() != wv.dims()[0] {
            return Err(shape_err("linear", xv.dims(), wv.dims()));
        }
        let fout = wv.dims()[0];
        let wt = wv.transpose();
        let mut out = matmul_raw(xv.data(), wt.data(), batch, fin, fout);
        for row in out.chunks_mut(fout) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![batch, fout], out), Op::Linear { x, w, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::from_parts(v.dims().to_vec(), v.data().iter().map(|a| a.tanh()).collect());
        self.push(value, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value =
            Tensor::from_parts(v.dims().to_vec(), v.data().iter().map(|a| a.max(0.0)).collect());
        self.push(value, Op::Relu(x))
    }

    /// Stride-1, zero-padding-1 3×3 convolution. `x` is (B,C,H,W), `w` is (O,C,3,3).
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let xd = xv.dims();
        let wd = wv.dims();
        if xd.len() != 4 || wd.len() != 4 || wd[1] != xd[1] || wd[2] != 3 || wd[3] != 3 || bv.len() != wd[0] {
            return Err(shape_err("conv3x3", xd, wd));
        }
        let (batch, cin, h, wid) = (xd[0], xd[1], xd[2], xd[3]);
        let cout = wd[0];
        let (xs, ws) = (xv.data(), wv.data());
        let mut out = vec![0.0; batch * cout * h * wid];
        for n in 0..batch {
            for o in 0..cout {
                let obase = (n * cout + o) * h * wid;
                out[obase..obase + h * wid].fill(bv.data()[o]);
                for c in 0..cin {
                    let xbase = (n * cin + c) * h * wid;
                    let wbase = (o * cin + c) * 9;
                    for di in 0..3 {
                        for dj in 0..3 {
                            let wv = ws[wbase + di * 3 + dj];
                            for i in 0..h {
                                let si = i + di;
                                if si < 1 || si > h {
                                    continue;
                                }
                                let xrow = xbase + (si - 1) * wid;
                                let orow = obase + i * wid;
                                for j in 0..wid {
                                    let sj = j + dj;
                                    if sj < 1 || sj > wid {
                                        continue;
                                    }
                                    out[orow + j] += wv * xs[xrow + sj - 1];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![batch, cout, h, wid], out), Op::Conv3x3 { x, w, b }))
    }

    /// 2×2 max pooling with stride 2 over (B,C,H,W); odd trailing rows/cols are dropped.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.dims();
        if d.len() != 4 || d[2] < 2 || d[3] < 2 {
            return Err(Error::Shape(format!("maxpool2 needs (B,C,H>=2,W>=2), got {d:?}")));
        }
        let (bc, h, w) = (d[0] * d[1], d[2], d[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xs = xv.data();
        let mut out = Vec::with_capacity(bc * oh * ow);
        let mut argmax = Vec::with_capacity(bc * oh * ow);
        for plane in 0..bc {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xs[idx] > xs[best] {
                            best = idx;
                        }
                    }
                    out.push(xs[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::from_parts(vec![d[0], d[1], oh, ow], out);
        Ok(self.push(value, Op::MaxPool2 { x, argmax }))
    }

    pub fn reshape(&mut self, x: Var, dims: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(dims)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    /// Mean of squared entries, as a one-element tensor.
    pub fn mean_square(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.data().iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        self.push(Tensor::from_parts(vec![1], vec![m]), Op::MeanSquare(a))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::Softmax(a))
    }

    /// Mean over rows of `-ln(max(p[i, y_i], eps))`.
    pub fn cross_entropy(&mut self, p: Var, labels: &[usize]) -> Result<Var> {
        let pv = self.value(p);
        let (rows, classes) = (pv.rows(), pv.cols());
        if labels.len() != rows {
            return Err(Error::Shape(format!("{} labels for {rows} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
        }
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -pv.at(i, y).max(PROB_EPS).ln())
            .sum::<f64>()
            / rows as f64;
        let value = Tensor::from_parts(vec![1], vec![loss]);
        Ok(self.push(value, Op::CrossEntropy { p, labels: labels.to_vec() }))
    }

    /// Mean over rows of `KL(p_i || q_i)`.
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        let (pv, qv) = (self.value(p), self.value(q));
        if pv.dims() != qv.dims() {
            return Err(shape_err("kl_div", pv.dims(), qv.dims()));
        }
        let rows = pv.rows();
        let total: f64 = (0..rows).map(|i| kl_row(pv.row(i), qv.row(i))).sum();
        let value = Tensor::from_parts(vec![1], vec![total / rows as f64]);
        Ok(self.push(value, Op::Kl { p, q }))
    }

    /// Reverse-mode sweep from the one-element node `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar output");
        let n = out.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[out.0] = Some(Tensor::filled(&[1], 1.0));

        for id in (0..n).rev() {
            let (lower, upper) = grads.split_at_mut(id);
            let Some(dy) = upper[0].as_ref() else { continue };
            let grads = lower;
            let node = &self.nodes[id];
            let y = &node.value;
            match &node.op {
                Op::Leaf | Op::Detach => {}
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (batch, fin, fout) = (xv.rows(), xv.cols(), wv.dims()[0]);
                    let dx = matmul_raw(dy.data(), wv.data(), batch, fout, fin);
                    let dyt = dy.transpose();
                    let dw = matmul_raw(dyt.data(), xv.data(), fout, batch, fin);
                    let mut db = vec![0.0; fout];
                    for row in dy.data().chunks(fout) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    accumulate(grads, *x, xv.dims(), dx);
                    accumulate(grads, *w, wv.dims(), dw);
                    accumulate(grads, *b, &[fout], db);
                }
                Op::MatMul { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, nn) = (av.rows(), av.cols(), bv.cols());
                    let bt = bv.transpose();
                    let da = matmul_raw(dy.data(), bt.data(), m, nn, k);
                    let at = av.transpose();
                    let dbm = matmul_raw(at.data(), dy.data(), k, m, nn);
                    accumulate(grads, *a, av.dims(), da);
                    accumulate(grads, *b, bv.dims(), dbm);
                }
                Op::Tanh(x) => {
                    let dx = dy.data().iter().zip(y.data()).map(|(g, t)| g * (1.0 - t * t)).collect();
                    accumulate(grads, *x, y.dims(), dx);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let dx = dy
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(g, a)| if *a > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(grads, *x, y.dims(), dx);
                }
                Op::Conv3x3 { x, w, b } => {
                    let (dx, dw, db) = conv3x3_backward(self.value(*x), self.value(*w), dy);
                    accumulate(grads, *x, self.value(*x).dims(), dx);
                    accumulate(grads, *w, self.value(*w).dims(), dw);
                    accumulate(grads, *b, self.value(*b).dims(), db);
                }
                Op::MaxPool2 { x, argmax } => {
                    let xv = self.value(*x);
                    let mut dx = vec![0.0; xv.len()];
                    for (&src, g) in argmax.iter().zip(dy.data()) {
                        dx[src] += g;
                    }
                    accumulate(grads, *x, xv.dims(), dx);
                }
                Op::Reshape(x) => {
                    let dims = self.value(*x).dims().to_vec();
                    accumulate(grads, *x, &dims, dy.data().to_vec());
                }
                Op::Add(a, b) => {
                    accumulate(grads, *a, y.dims(), dy.data().to_vec());
                    accumulate(grads, *b, y.dims(), dy.data().to_vec());
                }
                Op::Sub(a, b) => {
                    accumulate(grads, *a, y.dims(), dy.data().to_vec());
                    accumulate(grads, *b, y.dims(), dy.data().iter().map(|g| -g).collect());
                }
                Op::Scale(a, s) => {
                    accumulate(grads, *a, y.dims(), dy.data().iter().map(|g| g * s).collect());
                }
                Op::MeanSquare(a) => {
                    let av = self.value(*a);
                    let k = 2.0 * dy.data()[0] / av.len() as f64;
                    accumulate(grads, *a, av.dims(), av.data().iter().map(|v| k * v).collect());
                }
                Op::Softmax(a) => {
                    let c = y.cols();
                    let mut dx = vec![0.0; y.len()];
                    for ((prow, grow), drow) in
                        y.data().chunks(c).zip(dy.data().chunks(c)).zip(dx.chunks_mut(c))
                    {
                        let dot: f64 = prow.iter().zip(grow).map(|(p, g)| p * g).sum();
                        for ((d, p), g) in drow.iter_mut().zip(prow).zip(grow) {
                            *d = p * (g - dot);
                        }
                    }
                    accumulate(grads, *a, y.dims(), dx);
                }
                Op::CrossEntropy { p, labels } => {
                    let pv = self.value(*p);
                    let c = pv.cols();
                    let k = dy.data()[0] / labels.len() as f64;
                    let mut dp = vec![0.0; pv.len()];
                    for (i, &lab) in labels.iter().enumerate() {
                        let v = pv.data()[i * c + lab];
                        if v > PROB_EPS {
                            dp[i * c + lab] = -k / v;
                        }
                    }
                    accumulate(grads, *p, pv.dims(), dp);
                }
                Op::Kl { p, q } => {
                    let (pv, qv) = (self.value(*p), self.value(*q));
                    let k = dy.data()[0] / pv.rows() as f64;
                    let mut dp = Vec::with_capacity(pv.len());
                    let mut dq = Vec::with_capacity(pv.len());
                    for (&a, &b) in pv.data().iter().zip(qv.data()) {
                        let active = if a > PROB_EPS { 1.0 } else { 0.0 };
                        dp.push(k * (a.max(PROB_EPS).ln() - b.max(PROB_EPS).ln() + active));
                        dq.push(if b > PROB_EPS { -k * a / b } else { 0.0 });
                    }
                    accumulate(grads, *p, pv.dims(), dp);
                    accumulate(grads, *q, qv.dims(), dq);
                }
            }
        }
        let dims = self.nodes.iter().map(|nd| nd.value.dims().to_vec()).collect();
        Gradients { grads, dims }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, dims: &[usize], delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, d) in g.data_mut().iter_mut().zip(delta) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(Tensor::from_parts(dims.to_vec(), delta)),
    }
}

fn conv3x3_backward(xv: &Tensor, wv: &Tensor, dy: &Tensor) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let xd = xv.dims();
    let (batch, cin, h, wid) = (xd[0], xd[1], xd[2], xd[3]);
    let cout = wv.dims()[0];
    let (xs, ws, gs) = (xv.data(), wv.data(), dy.data());
    let mut dx = vec![0.0; xs.len()];
    let mut dw = vec![0.0; ws.len()];
    let mut db = vec![0.0; cout];
    for n in 0..batch {
        for o in 0..cout {
            let obase = (n * cout + o) * h * wid;
            db[o] += gs[obase..obase + h * wid].iter().sum::<f64>();
            for c in 0..cin {
                let xbase = (n * cin + c) * h * wid;
                let wbase = (o * cin + c) * 9;
                for di in 0..3 {
                    for dj in 0..3 {
                        let wk = ws[wbase + di * 3 + dj];
                        let mut acc = 0.0;
                        for i in 0..h {
                            let si = i + di;
                            if si < 1 || si > h {
                                continue;
                            }
                            let xrow = xbase + (si - 1) * wid;
                            let orow = obase + i * wid;
                            for j in 0..wid {
                                let sj = j + dj;
                                if sj < 1 || sj > wid {
                                    continue;
                                }
                                let g = gs[orow + j];
                                acc += g * xs[xrow + sj - 1];
                                dx[xrow + sj - 1] += g * wk;
                            }
                        }
                        dw[wbase + di * 3 + dj] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

pub(crate) fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = logits.cols();
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / s));
    }
    Tensor::from_parts(logits.dims().to_vec(), out)
}

pub(crate) fn kl_row(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| a * (a.max(PROB_EPS).ln() - b.max(PROB_EPS).ln()))
        .sum()
}
