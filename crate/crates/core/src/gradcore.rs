//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is a tape: every op appends a node whose parents have smaller
//! indices, so a single reverse sweep visits nodes in reverse topological
//! order, each exactly once. Graphs are cheap; build one per step.
//!
//! The module also carries the Gumbel-max / straight-through Gumbel-softmax
//! machinery, the losses used by the searches, and two optimizers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// arrays

/// Row-major dense array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "array",
                detail: format!("shape {shape:?} needs {n} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn one_hot(k: usize, index: usize) -> Self {
        let mut a = Self::zeros(&[k]);
        a.data[index] = 1.0;
        a
    }

    /// Uniform entries in `[-scale, scale)`.
    pub fn random_uniform<R: Rng + ?Sized>(shape: &[usize], scale: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element array.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on array of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[..self.shape.len() - 1].iter().product()
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Softmax along the last axis.
pub fn softmax(a: &Array) -> Array {
    let mut out = Array::zeros(&a.shape);
    let c = a.cols();
    if c == 0 {
        return out;
    }
    for (src, dst) in a.data.chunks(c).zip(out.data.chunks_mut(c)) {
        softmax_row(src, dst);
    }
    out
}

/// Log-softmax along the last axis.
pub fn log_softmax(a: &Array) -> Array {
    let mut out = Array::zeros(&a.shape);
    let c = a.cols();
    if c == 0 {
        return out;
    }
    for (src, dst) in a.data.chunks(c).zip(out.data.chunks_mut(c)) {
        log_softmax_row(src, dst);
    }
    out
}

// ---------------------------------------------------------------------------
// tape

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    /// Picks `x[i, labels[i]]` for each row.
    Gather(Var, Vec<usize>),
    /// `sum_i w[i] * items[i]` over constant arrays.
    WeightedSum(Var, Vec<Array>),
    /// Forward value is a fixed array; gradient passes to the relaxed input.
    StraightThrough(Var),
    /// `x * w[index]`.
    ScaleBy(Var, Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Array,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of every node after [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v` (zeros if `v` does not influence it).
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn wrt(&self, g: &Graph, v: Var) -> Array {
        self.get(v).cloned().unwrap_or_else(|| Array::zeros(g.value(v).shape()))
    }
}

fn mismatch(op: &'static str, a: &Array, b: &Array) -> Error {
    Error::ShapeMismatch { op, detail: format!("{:?} vs {:?}", a.shape, b.shape) }
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

    fn push(&mut self, value: Array, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A leaf (parameter or input). Gradients are reported for every leaf.
    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape.len() != 2 || y.shape.len() != 2 || x.shape[1] != y.shape[0] {
            return Err(mismatch("matmul", x, y));
        }
        let (n, k, m) = (x.shape[0], x.shape[1], y.shape[1]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let xv = x.data[i * k + p];
                if xv == 0.0 {
                    continue;
                }
                let row = &y.data[p * m..(p + 1) * m];
                for (o, &yv) in out[i * m..(i + 1) * m].iter_mut().zip(row) {
                    *o += xv * yv;
                }
            }
        }
        Ok(self.push(Array { shape: vec![n, m], data: out }, Op::MatMul(a, b)))
    }

    fn zip_same(&mut self, a: Var, b: Var, op_name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape != y.shape {
            return Err(mismatch(op_name, x, y));
        }
        let data = x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect();
        let shape = x.shape.clone();
        Ok(self.push(Array { shape, data }, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |p, q| p * q, Op::Mul(a, b))
    }

    /// `x[n, m] + row[m]`, broadcasting the row.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.len() != xv.cols() || xv.shape.is_empty() {
            return Err(mismatch("add_row", xv, rv));
        }
        let c = rv.len();
        let data = xv.data.iter().enumerate().map(|(i, &v)| v + rv.data[i % c]).collect();
        let shape = xv.shape.clone();
        Ok(self.push(Array { shape, data }, Op::AddRow(x, row)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).map(|t| t * s);
        self.push(v, Op::Scale(x, s))
    }

    /// Adds a constant array (no gradient flows into the constant).
    pub fn add_const(&mut self, x: Var, c: &Array) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape != c.shape {
            return Err(mismatch("add_const", xv, c));
        }
        let data = xv.data.iter().zip(&c.data).map(|(a, b)| a + b).collect();
        let shape = xv.shape.clone();
        Ok(self.push(Array { shape, data }, Op::AddConst(x)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|t| t.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::ln);
        self.push(v, Op::Log(x))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = softmax(self.value(x));
        self.push(v, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let v = log_softmax(self.value(x));
        self.push(v, Op::LogSoftmax(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Array::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data.iter().sum::<f64>() / xv.len().max(1) as f64;
        self.push(Array::scalar(s), Op::Mean(x))
    }

    /// `out[i] = x[i, labels[i]]`.
    pub fn gather(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if xv.shape.len() != 2 || rows != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "gather",
                detail: format!("{:?} with {} labels", xv.shape, labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::LabelOutOfRange { label: bad, classes: cols });
        }
        let data = labels.iter().enumerate().map(|(i, &l)| xv.data[i * cols + l]).collect();
        Ok(self.push(Array::vector(data), Op::Gather(x, labels.to_vec())))
    }

    /// `sum_i w[i] * items[i]` for a weight vector and constant items of equal shape.
    pub fn weighted_sum(&mut self, w: Var, items: Vec<Array>) -> Result<Var> {
        let wv = self.value(w);
        if wv.len() != items.len() || items.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                detail: format!("{} weights for {} items", wv.len(), items.len()),
            });
        }
        let shape = items[0].shape.clone();
        if items.iter().any(|a| a.shape != shape) {
            return Err(Error::ShapeMismatch { op: "weighted_sum", detail: "items differ in shape".into() });
        }
        let mut out = Array::zeros(&shape);
        for (&wi, item) in wv.data.iter().zip(&items) {
            if wi != 0.0 {
                for (o, &v) in out.data.iter_mut().zip(&item.data) {
                    *o += wi * v;
                }
            }
        }
        Ok(self.push(out, Op::WeightedSum(w, items)))
    }

    /// `x * w[index]` for a vector `w`.
    pub fn scale_by(&mut self, x: Var, w: Var, index: usize) -> Result<Var> {
        let wv = self.value(w);
        let Some(&factor) = wv.data.get(index) else {
            return Err(Error::ShapeMismatch { op: "scale_by", detail: format!("index {index} of {:?}", wv.shape) });
        };
        let v = self.value(x).map(|t| t * factor);
        Ok(self.push(v, Op::ScaleBy(x, w, index)))
    }

    /// Uses `forward` as the value while routing gradients to `relaxed`.
    pub fn straight_through(&mut self, forward: Array, relaxed: Var) -> Result<Var> {
        let rv = self.value(relaxed);
        if rv.shape != forward.shape {
            return Err(mismatch("straight_through", &forward, rv));
        }
        Ok(self.push(forward, Op::StraightThrough(relaxed)))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Array>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array::filled(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].clone() else { continue };
            let node = &self.nodes[idx];
            let mut acc = |v: Var, delta: Array| match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.data.iter_mut().zip(delta.data) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (x.shape[0], x.shape[1], y.shape[1]);
                    let mut ga = vec![0.0; n * k];
                    let mut gb = vec![0.0; k * m];
                    for i in 0..n {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..m {
                                let gij = g.data[i * m + j];
                                s += gij * y.data[p * m + j];
                                gb[p * m + j] += x.data[i * k + p] * gij;
                            }
                            ga[i * k + p] = s;
                        }
                    }
                    acc(*a, Array { shape: x.shape.clone(), data: ga });
                    acc(*b, Array { shape: y.shape.clone(), data: gb });
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddRow(x, row) => {
                    let c = self.value(*row).len();
                    let mut gr = vec![0.0; c];
                    for (i, &v) in g.data.iter().enumerate() {
                        gr[i % c] += v;
                    }
                    acc(*row, Array { shape: self.value(*row).shape.clone(), data: gr });
                    acc(*x, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|v| -v));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let ga = g.data.iter().zip(&y.data).map(|(d, v)| d * v).collect();
                    let gb = g.data.iter().zip(&x.data).map(|(d, v)| d * v).collect();
                    acc(*a, Array { shape: x.shape.clone(), data: ga });
                    acc(*b, Array { shape: y.shape.clone(), data: gb });
                }
                Op::Scale(x, s) => acc(*x, g.map(|v| v * s)),
                Op::AddConst(x) => acc(*x, g),
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let data = g.data.iter().zip(&xv.data).map(|(&d, &v)| if v > 0.0 { d } else { 0.0 }).collect();
                    acc(*x, Array { shape: xv.shape.clone(), data });
                }
                Op::Exp(x) => {
                    let data = g.data.iter().zip(&node.value.data).map(|(d, y)| d * y).collect();
                    acc(*x, Array { shape: node.value.shape.clone(), data });
                }
                Op::Log(x) => {
                    let xv = self.value(*x);
                    let data = g.data.iter().zip(&xv.data).map(|(d, v)| d / v).collect();
                    acc(*x, Array { shape: xv.shape.clone(), data });
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut data = vec![0.0; y.len()];
                    for ((gr, yr), out) in g.data.chunks(c).zip(y.data.chunks(c)).zip(data.chunks_mut(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                            *o = yi * (gi - dot);
                        }
                    }
                    acc(*x, Array { shape: y.shape.clone(), data });
                }
                Op::LogSoftmax(x) => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut data = vec![0.0; y.len()];
                    for ((gr, yr), out) in g.data.chunks(c).zip(y.data.chunks(c)).zip(data.chunks_mut(c)) {
                        let total: f64 = gr.iter().sum();
                        for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                            *o = gi - yi.exp() * total;
                        }
                    }
                    acc(*x, Array { shape: y.shape.clone(), data });
                }
                Op::Sum(x) => {
                    let shape = self.value(*x).shape.clone();
                    acc(*x, Array::filled(&shape, g.item()));
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    acc(*x, Array::filled(&xv.shape, g.item() / xv.len().max(1) as f64));
                }
                Op::Gather(x, labels) => {
                    let xv = self.value(*x);
                    let cols = xv.cols();
                    let mut out = Array::zeros(&xv.shape);
                    for (i, &l) in labels.iter().enumerate() {
                        out.data[i * cols + l] += g.data[i];
                    }
                    acc(*x, out);
                }
                Op::WeightedSum(w, items) => {
                    let data = items.iter().map(|it| it.data.iter().zip(&g.data).map(|(a, b)| a * b).sum()).collect();
                    acc(*w, Array { shape: self.value(*w).shape.clone(), data });
                }
                Op::StraightThrough(relaxed) => acc(*relaxed, g),
                Op::ScaleBy(x, w, index) => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let mut gw = Array::zeros(&wv.shape);
                    gw.data[*index] = g.data.iter().zip(&xv.data).map(|(a, b)| a * b).sum();
                    let factor = wv.data[*index];
                    acc(*x, g.map(|v| v * factor));
                    acc(*w, gw);
                }
            }
        }
        Gradients { grads }
    }
}

// ---------------------------------------------------------------------------
// losses

/// Mean cross-entropy of `logits[n, c]` against integer labels.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = g.log_softmax(logits);
    let picked = g.gather(lp, labels)?;
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

/// Mean over all elements of `(pred - target)^2`.
pub fn mse(g: &mut Graph, pred: Var, target: &Array) -> Result<Var> {
    let neg = target.map(|v| -v);
    let d = g.add_const(pred, &neg)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// Cross-entropy plus the squared L2 distance between student and teacher
/// logits, both averaged over the batch.
pub fn kd_loss(g: &mut Graph, student: Var, teacher: &Array, labels: &[usize]) -> Result<Var> {
    let ce = cross_entropy(g, student, labels)?;
    let neg = teacher.map(|v| -v);
    let d = g.add_const(student, &neg)?;
    let sq = g.mul(d, d)?;
    let total = g.sum(sq);
    let rows = g.value(student).rows().max(1) as f64;
    let dist = g.scale(total, 1.0 / rows);
    g.add(ce, dist)
}

// ---------------------------------------------------------------------------
// gumbel

/// Standard Gumbel noise. Uniform draws are clamped into the open interval
/// so the double log stays finite.
pub fn gumbel_noise<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    (0..k)
        .map(|_| {
            let u: f64 = rng.random::<f64>().clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
            -(-u.ln()).ln()
        })
        .collect()
}

fn check_logits(beta: &[f64]) -> Result<()> {
    if beta.is_empty() {
        return Err(Error::InvalidArgument("empty logit vector".into()));
    }
    if let Some(v) = beta.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("logit {v}")));
    }
    Ok(())
}

/// Draws an index from `softmax(beta)` via the Gumbel-max trick.
pub fn gumbel_sample<R: Rng + ?Sized>(beta: &[f64], rng: &mut R) -> Result<usize> {
    check_logits(beta)?;
    let lp = log_softmax(&Array::vector(beta.to_vec()));
    let noise = gumbel_noise(beta.len(), rng);
    let perturbed: Vec<f64> = lp.data.iter().zip(&noise).map(|(a, b)| a + b).collect();
    Ok(argmax(&perturbed))
}

/// One straight-through draw: the hard one-hot and its relaxed counterpart
/// computed from the same noise.
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelDraw {
    pub index: usize,
    pub hard: Array,
    pub relaxed: Array,
    pub noise: Vec<f64>,
}

/// Relaxed weights `softmax((log softmax(beta) + noise) / tau)` and the
/// matching hard sample.
pub fn gumbel_from_noise(beta: &[f64], noise: &[f64], tau: f64) -> Result<GumbelDraw> {
    check_logits(beta)?;
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    if noise.len() != beta.len() {
        return Err(Error::InvalidArgument(format!("{} noise values for {} logits", noise.len(), beta.len())));
    }
    let lp = log_softmax(&Array::vector(beta.to_vec()));
    let perturbed: Vec<f64> = lp.data.iter().zip(noise).map(|(a, b)| a + b).collect();
    let index = argmax(&perturbed);
    let relaxed = softmax(&Array::vector(perturbed.iter().map(|v| v / tau).collect()));
    Ok(GumbelDraw { index, hard: Array::one_hot(beta.len(), index), relaxed, noise: noise.to_vec() })
}

pub fn gumbel_softmax_st<R: Rng + ?Sized>(beta: &[f64], tau: f64, rng: &mut R) -> Result<GumbelDraw> {
    let noise = gumbel_noise(beta.len(), rng);
    gumbel_from_noise(beta, &noise, tau)
}

/// Graph version of the straight-through estimator: forward value is the
/// one-hot of `draw`, gradient flows through the relaxed weights into `beta`.
pub fn gumbel_st_var(g: &mut Graph, beta: Var, noise: &[f64], tau: f64) -> Result<(Var, usize)> {
    let draw = gumbel_from_noise(g.value(beta).data(), noise, tau)?;
    let lp = g.log_softmax(beta);
    let shifted = g.add_const(lp, &Array::vector(noise.to_vec()))?;
    let z = g.scale(shifted, 1.0 / tau);
    let relaxed = g.softmax(z);
    let st = g.straight_through(draw.hard, relaxed)?;
    Ok((st, draw.index))
}

/// Temperature annealed linearly per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TauSchedule {
    pub start: f64,
    pub end: f64,
}

impl Default for TauSchedule {
    fn default() -> Self {
        Self { start: 1000.0, end: 0.1 }
    }
}

impl TauSchedule {
    pub fn at(&self, epoch: usize, epochs: usize) -> f64 {
        if epochs <= 1 {
            return self.start;
        }
        let t = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
        self.start + (self.end - self.start) * t
    }
}

// ---------------------------------------------------------------------------
// optimizers

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 0.025, momentum: 0.9, weight_decay: 3e-4 }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self { config, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [Array], grads: &[Array]) -> Result<()> {
        check_grads(params, grads)?;
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        let c = self.config;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, &d), vel) in p.data.iter_mut().zip(&g.data).zip(v.iter_mut()) {
                let d = d + c.weight_decay * *w;
                *vel = c.momentum * *vel + d;
                *w -= c.lr * *vel;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8, weight_decay: 1e-3 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn step(&mut self, params: &mut [Array], grads: &[Array]) -> Result<()> {
        check_grads(params, grads)?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c = self.config;
        let b1t = 1.0 - c.beta1.powi(self.t as i32);
        let b2t = 1.0 - c.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for (j, (w, &d)) in p.data.iter_mut().zip(&g.data).enumerate() {
                let d = d + c.weight_decay * *w;
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = c.beta1 * *m + (1.0 - c.beta1) * d;
                *v = c.beta2 * *v + (1.0 - c.beta2) * d * d;
                *w -= c.lr * (*m / b1t) / ((*v / b2t).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

fn check_grads(params: &[Array], grads: &[Array]) -> Result<()> {
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.shape != g.shape) {
        return Err(Error::ShapeMismatch { op: "optimizer", detail: "parameter and gradient shapes differ".into() });
    }
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// snapshots

/// Flattens arrays into `u64` LE count followed by `f64` LE values.
pub fn snapshot(params: &[Array]) -> Vec<u8> {
    let n: usize = params.iter().map(Array::len).sum();
    let mut out = Vec::with_capacity(8 + 8 * n);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for v in params.iter().flat_map(|p| &p.data) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Inverse of [`snapshot`] given the original shapes.
pub fn restore(bytes: &[u8], shapes: &[Vec<usize>]) -> Result<Vec<Array>> {
    let bad = |m: String| Error::InvalidArgument(format!("snapshot: {m}"));
    let head: [u8; 8] = bytes.get(..8).ok_or_else(|| bad("truncated header".into()))?.try_into().unwrap();
    let n = u64::from_le_bytes(head) as usize;
    let want: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if n != want || bytes.len() != 8 + 8 * n {
        return Err(bad(format!("{n} values for {want} expected, {} bytes", bytes.len())));
    }
    let mut vals = bytes[8..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    Ok(shapes
        .iter()
        .map(|s| Array { shape: s.clone(), data: vals.by_ref().take(s.iter().product()).collect() })
        .collect())
}
