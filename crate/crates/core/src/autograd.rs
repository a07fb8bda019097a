//! Reverse-mode automatic differentiation over dense 2-D `f64` matrices.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its value and enough saved state to run its adjoint; calling
//! [`Graph::backward`] walks the nodes in reverse insertion order, which is a
//! valid topological order because nodes may only reference earlier nodes.
//!
//! Everything is a matrix: vectors are `1 × n` rows and scalars are `1 × 1`.
//! Parameters are bound from a [`ParamStore`] once per graph and their
//! gradients are read back by name.

use std::collections::HashMap;

use ndarray::{Array2, Axis};

use crate::params::ParamStore;

pub type Mat = Array2<f64>;

const LN_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Im2Col { input: Var, kernel: usize },
    MaxPool2 { input: Var, argmax: Vec<usize> },
    MeanRows(Var),
    L2NormalizeRows { input: Var, norms: Vec<f64> },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows { input: Var, inv_std: Vec<f64> },
    NllMean { input: Var, targets: Vec<usize> },
    Sum(Var),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Per-node adjoints produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
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

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient (used for inputs under test).
    pub fn variable(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Bind a named parameter. Repeated calls return the same node.
    ///
    /// Panics if `name` is not in `store`; parameter names are fixed by the
    /// model constructors so a miss is a programming error.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let p = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Gradients of every bound trainable parameter, keyed by name.
    pub fn param_grads(&self, grads: &Gradients) -> HashMap<String, Mat> {
        self.params
            .iter()
            .filter(|(_, v)| self.ng(**v))
            .map(|(name, v)| {
                let g = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Mat::zeros(self.value(*v).raw_dim()));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// `a + row`, broadcasting a `1 × n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row: bias must be a single row");
        assert_eq!(r.ncols(), self.value(a).ncols(), "add_row: width mismatch");
        let value = self.value(a) + r;
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    /// Multiply every element of `a` by the `1 × 1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let value = self.value(a) * k;
        let ng = self.ng(a) || self.ng(s);
        self.push(value, Op::ScaleBy(a, s), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let ng = self.ng(a);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: width mismatch");
        let ng = parts.iter().any(|v| self.ng(*v));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Rows of `a` selected by `idx` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), idx);
        let ng = self.ng(a);
        self.push(value, Op::GatherRows(a, idx.to_vec()), ng)
    }

    /// Unfold an `L × C` sequence into `L × (kernel·C)` windows centred on each
    /// position, zero-padded at both ends. Multiplying by a
    /// `(kernel·C) × C_out` weight gives a same-length 1-D convolution.
    pub fn im2col(&mut self, input: Var, kernel: usize) -> Var {
        assert!(kernel % 2 == 1, "im2col: kernel must be odd");
        let x = self.value(input);
        let (len, ch) = x.dim();
        let half = kernel / 2;
        let mut out = Mat::zeros((len, kernel * ch));
        for t in 0..len {
            for k in 0..kernel {
                let src = t as isize + k as isize - half as isize;
                if src < 0 || src >= len as isize {
                    continue;
                }
                let src = src as usize;
                for c in 0..ch {
                    out[[t, k * ch + c]] = x[[src, c]];
                }
            }
        }
        let ng = self.ng(input);
        self.push(out, Op::Im2Col { input, kernel }, ng)
    }

    /// Max-pool over time with kernel 2 and stride 2; a trailing odd row is
    /// dropped. Ties resolve to the earlier row.
    pub fn max_pool2(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let (len, ch) = x.dim();
        let out_len = len / 2;
        let mut out = Mat::zeros((out_len, ch));
        let mut argmax = Vec::with_capacity(out_len * ch);
        for i in 0..out_len {
            for c in 0..ch {
                let (a, b) = (x[[2 * i, c]], x[[2 * i + 1, c]]);
                if b > a {
                    out[[i, c]] = b;
                    argmax.push(2 * i + 1);
                } else {
                    out[[i, c]] = a;
                    argmax.push(2 * i);
                }
            }
        }
        let ng = self.ng(input);
        self.push(out, Op::MaxPool2 { input, argmax }, ng)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean_rows: empty input")
            .insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(value, Op::MeanRows(a), ng)
    }

    /// Divide each row by its Euclidean norm. Zero rows are left as zero; the
    /// callers that need a strict check do it before calling.
    pub fn l2_normalize_rows(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let norms: Vec<f64> = x
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .collect();
        let mut value = x.clone();
        for (mut row, &n) in value.rows_mut().into_iter().zip(&norms) {
            if n > 0.0 {
                row /= n;
            }
        }
        let ng = self.ng(input);
        self.push(value, Op::L2NormalizeRows { input, norms }, ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(value, Op::LogSoftmaxRows(a), ng)
    }

    /// Row-wise standardisation to zero mean and unit variance (no affine).
    pub fn layer_norm_rows(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let ncols = x.ncols() as f64;
        let mut value = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in value.rows_mut() {
            let mean = row.sum() / ncols;
            row -= mean;
            let var = row.dot(&row) / ncols;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row *= is;
            inv_std.push(is);
        }
        let ng = self.ng(input);
        self.push(value, Op::LayerNormRows { input, inv_std }, ng)
    }

    /// `-(1/n) Σ_i input[i, targets[i]]`, the mean negative log-likelihood
    /// when `input` holds log-probabilities.
    pub fn nll_mean(&mut self, input: Var, targets: &[usize]) -> Var {
        let x = self.value(input);
        assert_eq!(x.nrows(), targets.len(), "nll_mean: one target per row");
        let n = targets.len() as f64;
        let total: f64 = targets.iter().enumerate().map(|(i, &t)| x[[i, t]]).sum();
        let value = Mat::from_elem((1, 1), -total / n);
        let ng = self.ng(input);
        self.push(
            value,
            Op::NllMean {
                input,
                targets: targets.to_vec(),
            },
            ng,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    /// Row-vector linear map `x·W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    /// Reverse sweep from the `1 × 1` node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward: loss must be scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, d: Mat| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.ng(*row) {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g * self.value(*b));
                }
                if self.ng(*b) {
                    acc(*b, g * self.value(*a));
                }
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::ScaleBy(a, s) => {
                if self.ng(*a) {
                    acc(*a, g * self.scalar(*s));
                }
                if self.ng(*s) {
                    let d = (g * self.value(*a)).sum();
                    acc(*s, Mat::from_elem((1, 1), d));
                }
            }
            Op::Exp(a) => acc(*a, g * &node.value),
            Op::Relu(a) => {
                let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                acc(*a, g * &mask);
            }
            Op::Gelu(a) => {
                let d = self.value(*a).mapv(gelu_grad);
                acc(*a, g * &d);
            }
            Op::Tanh(a) => {
                let d = node.value.mapv(|y| 1.0 - y * y);
                acc(*a, g * &d);
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.value(*p).nrows();
                    if self.ng(*p) {
                        acc(*p, g.slice(ndarray::s![start..start + rows, ..]).to_owned());
                    }
                    start += rows;
                }
            }
            Op::GatherRows(a, idx) => {
                let mut d = Mat::zeros(self.value(*a).raw_dim());
                for (i, &src) in idx.iter().enumerate() {
                    let mut row = d.row_mut(src);
                    row += &g.row(i);
                }
                acc(*a, d);
            }
            Op::Im2Col { input, kernel } => {
                let (len, ch) = self.value(*input).dim();
                let half = kernel / 2;
                let mut d = Mat::zeros((len, ch));
                for t in 0..len {
                    for k in 0..*kernel {
                        let src = t as isize + k as isize - half as isize;
                        if src < 0 || src >= len as isize {
                            continue;
                        }
                        let src = src as usize;
                        for c in 0..ch {
                            d[[src, c]] += g[[t, k * ch + c]];
                        }
                    }
                }
                acc(*input, d);
            }
            Op::MaxPool2 { input, argmax } => {
                let mut d = Mat::zeros(self.value(*input).raw_dim());
                let ch = g.ncols();
                for i in 0..g.nrows() {
                    for c in 0..ch {
                        d[[argmax[i * ch + c], c]] += g[[i, c]];
                    }
                }
                acc(*input, d);
            }
            Op::MeanRows(a) => {
                let rows = self.value(*a).nrows();
                let row = g.row(0).mapv(|x| x / rows as f64);
                let d = Mat::from_shape_fn((rows, g.ncols()), |(_, c)| row[c]);
                acc(*a, d);
            }
            Op::L2NormalizeRows { input, norms } => {
                let y = &node.value;
                let mut d = Mat::zeros(y.raw_dim());
                for (i, &n) in norms.iter().enumerate() {
                    if n == 0.0 {
                        continue;
                    }
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let proj = yr.dot(&gr);
                    let mut dr = d.row_mut(i);
                    dr.assign(&((&gr - &(&yr * proj)) / n));
                }
                acc(*input, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let gy = g * y;
                let s = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(*a, &gy - &(y * &s));
            }
            Op::LogSoftmaxRows(a) => {
                let p = node.value.mapv(f64::exp);
                let s = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(*a, g - &(&p * &s));
            }
            Op::LayerNormRows { input, inv_std } => {
                let y = &node.value;
                let n = y.ncols() as f64;
                let mut d = Mat::zeros(y.raw_dim());
                for (i, &is) in inv_std.iter().enumerate() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let mg = gr.sum() / n;
                    let mgy = gr.dot(&yr) / n;
                    let mut dr = d.row_mut(i);
                    dr.assign(&((&gr - mg - &(&yr * mgy)) * is));
                }
                acc(*input, d);
            }
            Op::NllMean { input, targets } => {
                let n = targets.len() as f64;
                let mut d = Mat::zeros(self.value(*input).raw_dim());
                for (i, &t) in targets.iter().enumerate() {
                    d[[i, t]] = -g[[0, 0]] / n;
                }
                acc(*input, d);
            }
            Op::Sum(a) => {
                let d = Mat::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                acc(*a, d);
            }
        }
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn log_softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row -= lse;
    }
    out
}

pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}
