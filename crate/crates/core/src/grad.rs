//! Reverse-mode automatic differentiation over dense 2-D `f64` tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass (define-by-run). Each op
//! appends a node holding its forward value; [`Tape::backward`] walks the
//! nodes in reverse creation order exactly once and accumulates adjoints.
//!
//! ```
//! use msmix::grad::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::row(vec![1.0, 2.0, 3.0]));
//! let sq = tape.square(x);
//! let root = tape.sum(sq);
//! let grads = tape.backward(root).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```
//!
//! Tensors are always rows × cols; a scalar is 1 × 1. Binary element-wise
//! ops broadcast a dimension of size 1 against any size.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },
    #[error("{op}: invalid argument ({detail})")]
    Invalid { op: &'static str, detail: String },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot([usize; 2]),
    #[error("variable {0} is not on this tape")]
    UnknownVar(usize),
    #[error("function value is not finite at perturbed point (parameter {tensor}, element {index})")]
    NonFinite { tensor: usize, index: usize },
}

pub type Result<T> = std::result::Result<T, GradError>;

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor[{}x{}]{:?}", self.rows, self.cols, self.data)
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(GradError::Invalid {
                op: "tensor",
                detail: format!("{}x{} needs {} values, got {}", rows, cols, rows * cols, data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a tensor from a shape list of rank 0, 1 (a row) or 2.
    pub fn from_shape(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        match *shape {
            [] => Self::new(1, 1, data),
            [n] => Self::new(1, n, data),
            [r, c] => Self::new(r, c, data),
            _ => Err(GradError::Invalid {
                op: "tensor",
                detail: format!("rank {} tensors are not supported", shape.len()),
            }),
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![value] }
    }

    pub fn row(values: Vec<f64>) -> Self {
        Self { rows: 1, cols: values.len(), data: values }
    }

    pub fn column(values: Vec<f64>) -> Self {
        Self { rows: values.len(), cols: 1, data: values }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(GradError::Shape { op: "matmul", lhs: self.shape(), rhs: other.shape() });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor { rows: m, cols: n, data: out })
    }

    /// `self · otherᵀ`.
    fn matmul_bt(&self, other: &Tensor) -> Tensor {
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Tensor { rows: m, cols: n, data: out }
    }

    /// `selfᵀ · other`.
    fn matmul_at(&self, other: &Tensor) -> Tensor {
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let b_row = &other.data[p * n..(p + 1) * n];
            for i in 0..m {
                let a = self.data[p * m + i];
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor { rows: m, cols: n, data: out }
    }

    /// Sums `self` down to `shape` along broadcast dimensions.
    fn reduce_to(&self, shape: [usize; 2]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let mut out = Tensor::zeros(shape[0], shape[1]);
        for r in 0..self.rows {
            let orow = if shape[0] == 1 { 0 } else { r };
            for c in 0..self.cols {
                let ocol = if shape[1] == 1 { 0 } else { c };
                out.data[orow * shape[1] + ocol] += self.data[r * self.cols + c];
            }
        }
        out
    }
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<[usize; 2]> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.rows, b.rows), dim(a.cols, b.cols)) {
        (Some(r), Some(c)) => Ok([r, c]),
        _ => Err(GradError::Shape { op, lhs: a.shape(), rhs: b.shape() }),
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, shape: [usize; 2], f: impl Fn(f64, f64) -> f64) -> Tensor {
    let [rows, cols] = shape;
    if a.shape() == shape && b.shape() == shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Tensor { rows, cols, data };
    }
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let ar = if a.rows == 1 { 0 } else { r };
        let br = if b.rows == 1 { 0 } else { r };
        for c in 0..cols {
            let ac = if a.cols == 1 { 0 } else { c };
            let bc = if b.cols == 1 { 0 } else { c };
            data.push(f(a.data[ar * a.cols + ac], b.data[br * b.cols + bc]));
        }
    }
    Tensor { rows, cols, data }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Overflow-safe `ln Σ exp(x_i)`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || !max.is_finite() {
        return max;
    }
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// The op kinds a tape can record. Parameterized kinds carry their
/// configuration inline.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    Square,
    /// Sum of all elements to a scalar.
    Sum,
    /// Mean of all elements to a scalar.
    Mean,
    /// Row-wise sum, rows × cols → rows × 1.
    SumRows,
    /// Column-wise concatenation of any number of inputs with equal rows.
    Concat,
    /// Column slice `[start, start + len)`.
    Slice { start: usize, len: usize },
    /// Row-wise `ln Σ_j exp(x_ij)`, rows × cols → rows × 1.
    LogSumExp,
    /// LSTM cell update from gate pre-activations `[i, f, g, o]`
    /// (B × 4H) and the previous cell state (B × H); yields
    /// `[h | c | i f g o | tanh c]` (B × 7H). Only the first 2H columns
    /// are meant to be consumed; the rest caches activations for backward.
    LstmCell,
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Neg => "neg",
            OpKind::Scale(_) => "scale",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softplus => "softplus",
            OpKind::Square => "square",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumRows => "sum_rows",
            OpKind::Concat => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::LogSumExp => "log_sum_exp",
            OpKind::LstmCell => "lstm_cell",
        }
    }
}

struct Node {
    value: Tensor,
    kind: Option<OpKind>,
    inputs: Vec<Var>,
    requires_grad: bool,
}

/// Define-by-run computation record.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`. `None` means the root
    /// does not depend on `var` (or `var` is a constant).
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but materializes zeros of `shape` when absent.
    pub fn get_or_zeros(&self, var: Var, shape: [usize; 2]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape[0], shape[1]))
    }
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

    /// Records a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, None, Vec::new(), true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, None, Vec::new(), false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> [usize; 2] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, kind: Option<OpKind>, inputs: Vec<Var>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, kind, inputs, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, vars: &[Var]) -> Result<()> {
        match vars.iter().find(|v| v.0 >= self.nodes.len()) {
            Some(v) => Err(GradError::UnknownVar(v.0)),
            None => Ok(()),
        }
    }

    /// Applies `kind` to `inputs`, records the result and returns its handle.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        self.check(inputs)?;
        let arity_err = |n: usize| GradError::Invalid {
            op: kind.name(),
            detail: format!("expected {} input(s), got {}", n, inputs.len()),
        };
        let value = match &kind {
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
                if inputs.len() != 2 {
                    return Err(arity_err(2));
                }
                let a = &self.nodes[inputs[0].0].value;
                let b = &self.nodes[inputs[1].0].value;
                match kind {
                    OpKind::MatMul => a.matmul(b)?,
                    OpKind::Add => zip_broadcast(a, b, broadcast_shape("add", a, b)?, |x, y| x + y),
                    OpKind::Sub => zip_broadcast(a, b, broadcast_shape("sub", a, b)?, |x, y| x - y),
                    OpKind::Mul => zip_broadcast(a, b, broadcast_shape("mul", a, b)?, |x, y| x * y),
                    _ => zip_broadcast(a, b, broadcast_shape("div", a, b)?, |x, y| x / y),
                }
            }
            OpKind::LstmCell => {
                if inputs.len() != 2 {
                    return Err(arity_err(2));
                }
                let pre = &self.nodes[inputs[0].0].value;
                let c_prev = &self.nodes[inputs[1].0].value;
                if pre.cols != 4 * c_prev.cols || pre.rows != c_prev.rows {
                    return Err(GradError::Shape { op: "lstm_cell", lhs: pre.shape(), rhs: c_prev.shape() });
                }
                let hidden = c_prev.cols;
                let w = 7 * hidden;
                let mut data = vec![0.0; pre.rows * w];
                for r in 0..pre.rows {
                    let p = pre.row_slice(r);
                    let cp = c_prev.row_slice(r);
                    let out = &mut data[r * w..(r + 1) * w];
                    for k in 0..hidden {
                        let (i, f, g, o) = (sigmoid(p[k]), sigmoid(p[hidden + k]), p[2 * hidden + k].tanh(), sigmoid(p[3 * hidden + k]));
                        let c = f * cp[k] + i * g;
                        let tc = c.tanh();
                        out[k] = o * tc;
                        out[hidden + k] = c;
                        out[2 * hidden + k] = i;
                        out[3 * hidden + k] = f;
                        out[4 * hidden + k] = g;
                        out[5 * hidden + k] = o;
                        out[6 * hidden + k] = tc;
                    }
                }
                Tensor { rows: pre.rows, cols: w, data }
            }
            OpKind::Concat => {
                if inputs.is_empty() {
                    return Err(arity_err(1));
                }
                let rows = self.nodes[inputs[0].0].value.rows;
                for v in inputs {
                    let t = &self.nodes[v.0].value;
                    if t.rows != rows {
                        return Err(GradError::Shape {
                            op: "concat",
                            lhs: self.nodes[inputs[0].0].value.shape(),
                            rhs: t.shape(),
                        });
                    }
                }
                let cols: usize = inputs.iter().map(|v| self.nodes[v.0].value.cols).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for v in inputs {
                        data.extend_from_slice(self.nodes[v.0].value.row_slice(r));
                    }
                }
                Tensor { rows, cols, data }
            }
            unary => {
                if inputs.len() != 1 {
                    return Err(arity_err(1));
                }
                let a = &self.nodes[inputs[0].0].value;
                match unary {
                    OpKind::Neg => a.map(|x| -x),
                    OpKind::Scale(c) => {
                        let c = *c;
                        a.map(|x| c * x)
                    }
                    OpKind::Exp => a.map(f64::exp),
                    OpKind::Log => a.map(f64::ln),
                    OpKind::Tanh => a.map(f64::tanh),
                    OpKind::Sigmoid => a.map(sigmoid),
                    OpKind::Softplus => a.map(softplus),
                    OpKind::Square => a.map(|x| x * x),
                    OpKind::Sum => Tensor::scalar(a.data.iter().sum()),
                    OpKind::Mean => {
                        if a.is_empty() {
                            return Err(GradError::Invalid { op: "mean", detail: "empty tensor".into() });
                        }
                        Tensor::scalar(a.data.iter().sum::<f64>() / a.len() as f64)
                    }
                    OpKind::SumRows => {
                        Tensor::column((0..a.rows).map(|r| a.row_slice(r).iter().sum()).collect())
                    }
                    OpKind::Slice { start, len } => {
                        if start + len > a.cols || *len == 0 {
                            return Err(GradError::Invalid {
                                op: "slice",
                                detail: format!("columns [{}, {}) out of range for {:?}", start, start + len, a.shape()),
                            });
                        }
                        let mut data = Vec::with_capacity(a.rows * len);
                        for r in 0..a.rows {
                            data.extend_from_slice(&a.row_slice(r)[*start..start + len]);
                        }
                        Tensor { rows: a.rows, cols: *len, data }
                    }
                    OpKind::LogSumExp => {
                        if a.cols == 0 {
                            return Err(GradError::Invalid { op: "log_sum_exp", detail: "no columns".into() });
                        }
                        Tensor::column((0..a.rows).map(|r| log_sum_exp(a.row_slice(r))).collect())
                    }
                    _ => unreachable!(),
                }
            }
        };
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, Some(kind), inputs.to_vec(), requires_grad))
    }

    /// Fused LSTM step; `h` and `c` are the column slices `[0, H)` and
    /// `[H, 2H)` of the result.
    pub fn lstm_cell(&mut self, pre: Var, c_prev: Var) -> Result<Var> {
        self.forward_op(OpKind::LstmCell, &[pre, c_prev])
    }

    fn unary(&mut self, kind: OpKind, a: Var) -> Var {
        self.forward_op(kind, &[a]).expect("unary ops accept any shape")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::Div, &[a, b])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(OpKind::Neg, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(OpKind::Scale(c), a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(OpKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(OpKind::Log, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(OpKind::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(OpKind::Sigmoid, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(OpKind::Softplus, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(OpKind::Square, a)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.unary(OpKind::Sum, a)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Mean, &[a])
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        self.unary(OpKind::SumRows, a)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.forward_op(OpKind::Concat, parts)
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.forward_op(OpKind::Slice { start, len }, &[a])
    }

    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::LogSumExp, &[a])
    }

    /// Gradient of the scalar `root` with respect to every node it depends on.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.check(&[root])?;
        let root_shape = self.nodes[root.0].value.shape();
        if root_shape != [1, 1] {
            return Err(GradError::NonScalarRoot(root_shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            let Some(kind) = &node.kind else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[id].take() else { continue };
            let contributions = self.local_grads(kind, &node.inputs, &node.value, &upstream);
            for (input, g) in node.inputs.iter().zip(contributions) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
            grads[id] = Some(upstream);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads })
    }

    fn local_grads(&self, kind: &OpKind, inputs: &[Var], out: &Tensor, up: &Tensor) -> Vec<Option<Tensor>> {
        let val = |i: usize| &self.nodes[inputs[i].0].value;
        let needs = |i: usize| self.nodes[inputs[i].0].requires_grad;
        let elementwise = |f: &dyn Fn(f64, f64) -> f64| -> Tensor {
            // f(input, output) * upstream
            let a = val(0);
            Tensor {
                rows: a.rows,
                cols: a.cols,
                data: a.data.iter().zip(&out.data).zip(&up.data).map(|((&x, &y), &g)| f(x, y) * g).collect(),
            }
        };
        match kind {
            OpKind::MatMul => vec![
                needs(0).then(|| up.matmul_bt(val(1))),
                needs(1).then(|| val(0).matmul_at(up)),
            ],
            OpKind::Add => vec![
                needs(0).then(|| up.reduce_to(val(0).shape())),
                needs(1).then(|| up.reduce_to(val(1).shape())),
            ],
            OpKind::Sub => vec![
                needs(0).then(|| up.reduce_to(val(0).shape())),
                needs(1).then(|| up.map(|g| -g).reduce_to(val(1).shape())),
            ],
            OpKind::Mul => vec![
                needs(0).then(|| zip_broadcast(up, val(1), up.shape(), |g, b| g * b).reduce_to(val(0).shape())),
                needs(1).then(|| zip_broadcast(up, val(0), up.shape(), |g, a| g * a).reduce_to(val(1).shape())),
            ],
            OpKind::Div => {
                let b = val(1);
                let ga = needs(0).then(|| zip_broadcast(up, b, up.shape(), |g, b| g / b).reduce_to(val(0).shape()));
                let gb = needs(1).then(|| {
                    // d(a/b)/db = -out / b
                    let t = zip_broadcast(out, b, up.shape(), |o, b| -o / b);
                    zip_broadcast(&t, up, up.shape(), |t, g| t * g).reduce_to(b.shape())
                });
                vec![ga, gb]
            }
            OpKind::Neg => vec![Some(up.map(|g| -g))],
            OpKind::Scale(c) => {
                let c = *c;
                vec![Some(up.map(|g| c * g))]
            }
            OpKind::Exp => vec![Some(elementwise(&|_, y| y))],
            OpKind::Log => vec![Some(elementwise(&|x, _| 1.0 / x))],
            OpKind::Tanh => vec![Some(elementwise(&|_, y| 1.0 - y * y))],
            OpKind::Sigmoid => vec![Some(elementwise(&|_, y| y * (1.0 - y)))],
            OpKind::Softplus => vec![Some(elementwise(&|x, _| sigmoid(x)))],
            OpKind::Square => vec![Some(elementwise(&|x, _| 2.0 * x))],
            OpKind::Sum => {
                let a = val(0);
                vec![Some(Tensor::filled(a.rows, a.cols, up.item()))]
            }
            OpKind::Mean => {
                let a = val(0);
                vec![Some(Tensor::filled(a.rows, a.cols, up.item() / a.len() as f64))]
            }
            OpKind::SumRows => {
                let a = val(0);
                let mut g = Tensor::zeros(a.rows, a.cols);
                for r in 0..a.rows {
                    let u = up.data[r];
                    g.data[r * a.cols..(r + 1) * a.cols].iter_mut().for_each(|v| *v = u);
                }
                vec![Some(g)]
            }
            OpKind::Concat => {
                let mut offset = 0;
                inputs
                    .iter()
                    .enumerate()
                    .map(|(i, _)| {
                        let t = val(i);
                        let start = offset;
                        offset += t.cols;
                        needs(i).then(|| {
                            let mut data = Vec::with_capacity(t.len());
                            for r in 0..t.rows {
                                data.extend_from_slice(&up.row_slice(r)[start..start + t.cols]);
                            }
                            Tensor { rows: t.rows, cols: t.cols, data }
                        })
                    })
                    .collect()
            }
            OpKind::Slice { start, len } => {
                let a = val(0);
                let mut g = Tensor::zeros(a.rows, a.cols);
                for r in 0..a.rows {
                    g.data[r * a.cols + start..r * a.cols + start + len].copy_from_slice(up.row_slice(r));
                }
                vec![Some(g)]
            }
            OpKind::LogSumExp => {
                // softmax(x) * upstream
                let a = val(0);
                let mut g = Tensor::zeros(a.rows, a.cols);
                for r in 0..a.rows {
                    let lse = out.data[r];
                    let u = up.data[r];
                    for c in 0..a.cols {
                        g.data[r * a.cols + c] = (a.data[r * a.cols + c] - lse).exp() * u;
                    }
                }
                vec![Some(g)]
            }
            OpKind::LstmCell => {
                let (pre, c_prev) = (val(0), val(1));
                let hidden = c_prev.cols;
                let mut g_pre = Tensor::zeros(pre.rows, pre.cols);
                let mut g_c = Tensor::zeros(c_prev.rows, hidden);
                for r in 0..pre.rows {
                    let o_row = out.row_slice(r);
                    let u = up.row_slice(r);
                    for k in 0..hidden {
                        let [i, f, g, o, tc] = [2, 3, 4, 5, 6].map(|j| o_row[j * hidden + k]);
                        let dc = u[hidden + k] + u[k] * o * (1.0 - tc * tc);
                        let cp = c_prev.data[r * hidden + k];
                        let gp = &mut g_pre.data[r * 4 * hidden..(r + 1) * 4 * hidden];
                        gp[k] = dc * g * i * (1.0 - i);
                        gp[hidden + k] = dc * cp * f * (1.0 - f);
                        gp[2 * hidden + k] = dc * i * (1.0 - g * g);
                        gp[3 * hidden + k] = u[k] * tc * o * (1.0 - o);
                        g_c.data[r * hidden + k] = dc * f;
                    }
                }
                vec![needs(0).then_some(g_pre), needs(1).then_some(g_c)]
            }
        }
    }
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` rebuilds its graph on the tape it is handed, reading the parameters
/// from the provided leaves. Returns the maximum over all parameter
/// elements of `|autodiff − fd| / max(1, |fd|)`.
pub fn check_gradients<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(GradError::Invalid { op: "check_gradients", detail: format!("step must be > 0, got {}", step) });
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let root = f(&mut tape, &vars)?;
        Ok(tape.value(root).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_err: f64 = 0.0;
    for (ti, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, params[ti].shape());
        for idx in 0..params[ti].len() {
            let orig = params[ti].data[idx];
            work[ti].data[idx] = orig + step;
            let plus = eval(&work)?;
            work[ti].data[idx] = orig - step;
            let minus = eval(&work)?;
            work[ti].data[idx] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(GradError::NonFinite { tensor: ti, index: idx });
            }
            let fd = (plus - minus) / (2.0 * step);
            let err = (analytic.data[idx] - fd).abs() / fd.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::new(3, 3, (1..=9).map(f64::from).collect()).unwrap();
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(3));
        let av = tape.constant(a.clone());
        let out = tape.matmul(i, av).unwrap();
        assert_eq!(tape.value(out), &a);
    }

    #[test]
    fn lse_and_softplus_of_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![0.0, 0.0]));
        let l = tape.log_sum_exp(x).unwrap();
        assert!(close(tape.value(l).item(), std::f64::consts::LN_2, 1e-15));
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.softplus(z);
        assert!(close(tape.value(s).item(), 0.693147, 1e-6));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(err, GradError::Shape { op: "matmul", lhs: [2, 3], rhs: [2, 3] });
        assert!(err.to_string().contains("matmul"));
        let c = tape.constant(Tensor::zeros(3, 2));
        assert!(matches!(tape.add(a, c), Err(GradError::Shape { op: "add", .. })));
    }

    #[test]
    fn lstm_cell_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut t = |r, c| Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap();
        let params = [t(3, 8), t(3, 2), t(1, 4)];
        let err = check_gradients(
            |tape, v| {
                let cell = tape.lstm_cell(v[0], v[1])?;
                let hc = tape.slice(cell, 0, 4)?;
                let w = tape.constant(params_weights());
                let z = tape.mul(hc, w)?;
                Ok(tape.sum(z))
            },
            &params[..2],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "{}", err);

        fn params_weights() -> Tensor {
            Tensor::row(vec![0.3, -1.1, 0.7, 2.0])
        }
        let mut tape = Tape::new();
        let pre = tape.constant(params[0].clone());
        let bad = tape.constant(params[2].clone());
        assert!(tape.lstm_cell(pre, bad).is_err());
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(vec![1.0, 2.0, 3.0]));
        let sq = tape.square(x);
        let root = tape.sum(sq);
        let g = tape.backward(root).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
        assert_eq!(g.get(root).unwrap().item(), 1.0);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let root = tape.log(x);
        let g = tape.backward(root).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 0.5);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(vec![1.0, 2.0]));
        let y = tape.exp(x);
        assert_eq!(tape.backward(y).unwrap_err(), GradError::NonScalarRoot([1, 2]));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let c = tape.constant(Tensor::scalar(4.0));
        let p = tape.mul(x, c).unwrap();
        let g = tape.backward(p).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 4.0);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn bilinear_and_constant_gradient_checks() {
        let err = check_gradients(
            |t, v| {
                let p = t.mul(v[0], v[1])?;
                Ok(t.sum(p))
            },
            &[Tensor::scalar(2.0), Tensor::scalar(3.0)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{}", err);

        let err = check_gradients(
            |t, _| Ok(t.constant(Tensor::scalar(7.0))),
            &[Tensor::row(vec![1.0, -1.0])],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);

        assert!(check_gradients(|t, v| Ok(t.sum(v[0])), &[Tensor::scalar(1.0)], 0.0).is_err());
    }

    #[test]
    fn non_finite_perturbation_is_an_error() {
        // log(x) at x = 0 + step is finite, at x - step it is NaN
        let r = check_gradients(
            |t, v| {
                let l = t.log(v[0]);
                Ok(t.sum(l))
            },
            &[Tensor::scalar(0.0)],
            1e-5,
        );
        assert!(matches!(r, Err(GradError::NonFinite { .. })));
    }

    #[test]
    fn every_op_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rand_t = |r: usize, c: usize, lo: f64, hi: f64| {
            Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
        };
        let a = rand_t(3, 4, -1.0, 1.0);
        let b = rand_t(4, 2, -1.0, 1.0);
        let row = rand_t(1, 4, -1.0, 1.0);
        let col = rand_t(3, 1, 0.5, 2.0);
        let pos = rand_t(3, 4, 0.5, 2.0);

        let err = check_gradients(
            |t, v| {
                let m = t.matmul(v[0], v[1])?; // 3x2
                let e = t.add(v[0], v[2])?; // row broadcast
                let d = t.div(e, v[3])?; // column broadcast
                let s = t.sub(d, v[4])?;
                let q = t.mul(s, v[4])?;
                let th = t.tanh(q);
                let sg = t.sigmoid(m);
                let sp = t.softplus(th);
                let lg = t.log(v[4]);
                let ex = t.exp(sg);
                let sq = t.square(lg);
                let cat = t.concat(&[sp, ex, sq])?;
                let sl = t.slice(cat, 1, 6)?;
                let lse = t.log_sum_exp(sl)?;
                let rs = t.sum_rows(cat);
                let both = t.concat(&[lse, rs])?;
                let n = t.neg(both);
                let sc = t.scale(n, 0.3);
                t.mean(sc)
            },
            &[a, b, row, col, pos],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "max rel err {}", err);
    }

    #[test]
    fn log_sum_exp_is_overflow_safe() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(vec![1000.0, -1000.0, 999.0]));
        let l = tape.log_sum_exp(x).unwrap();
        let v = tape.value(l).item();
        assert!(v.is_finite());
        assert!(close(v, 1000.0 + (1.0 + (-1.0f64).exp()).ln(), 1e-9));
        let g = tape.backward(l).unwrap();
        let g = g.get(x).unwrap();
        assert!(g.all_finite());
        assert!(close(g.data().iter().sum::<f64>(), 1.0, 1e-12));
    }

    #[test]
    fn repeated_use_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 7.0);
    }

    #[test]
    fn unknown_var_is_rejected() {
        let mut tape = Tape::new();
        let mut other = Tape::new();
        other.constant(Tensor::scalar(1.0));
        let v = other.constant(Tensor::scalar(2.0));
        assert_eq!(tape.forward_op(OpKind::Exp, &[v]).unwrap_err(), GradError::UnknownVar(1));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn random_graph(tape: &mut Tape, x: Var, ops: &[u8]) -> Var {
            let mut cur = x;
            for op in ops {
                cur = match op % 6 {
                    0 => tape.tanh(cur),
                    1 => tape.sigmoid(cur),
                    2 => tape.scale(cur, 0.7),
                    3 => {
                        let s = tape.square(cur);
                        tape.scale(s, 0.1)
                    }
                    4 => tape.softplus(cur),
                    _ => tape.mul(cur, x).unwrap(),
                };
            }
            tape.sum(cur)
        }

        proptest! {
            #[test]
            fn backward_is_linear(
                xs in proptest::collection::vec(-2.0f64..2.0, 4),
                ops_a in proptest::collection::vec(any::<u8>(), 1..8),
                ops_b in proptest::collection::vec(any::<u8>(), 1..8),
            ) {
                let t = Tensor::row(xs);
                let grad_of = |which: u8| {
                    let mut tape = Tape::new();
                    let x = tape.param(t.clone());
                    let root = match which {
                        0 => random_graph(&mut tape, x, &ops_a),
                        1 => random_graph(&mut tape, x, &ops_b),
                        _ => {
                            let a = random_graph(&mut tape, x, &ops_a);
                            let b = random_graph(&mut tape, x, &ops_b);
                            tape.add(a, b).unwrap()
                        }
                    };
                    tape.backward(root).unwrap().get(x).unwrap().clone()
                };
                let (ga, gb, gs) = (grad_of(0), grad_of(1), grad_of(2));
                for i in 0..4 {
                    let expect = ga.data()[i] + gb.data()[i];
                    prop_assert!((gs.data()[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
                }
            }
        }
    }
}
