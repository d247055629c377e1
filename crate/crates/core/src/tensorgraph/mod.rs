//! Dense row-major tensors recorded on a tape, with reverse-mode
//! differentiation.
//!
//! A [`Graph`] owns every node created during a forward pass. Nodes are
//! appended in evaluation order, so the node list is already a topological
//! order and [`Graph::backward`] is a single reverse sweep.
//!
//! Two-dimensional ops view an N-d tensor as `[prod(shape[..-1]), shape[-1]]`.
//! The only broadcast supported is a row vector (`[c]` or `[1, c]`) over a
//! `[r, c]` matrix.

mod check;
mod gemm;
mod matrix;

use std::collections::HashMap;

use thiserror::Error;

pub use check::grad_check;
pub use matrix::Matrix;

pub(crate) use gemm::gemm;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: numeric domain violation: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("{op}: {detail}")]
    Contract { op: &'static str, detail: String },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GraphTensor(usize);

impl GraphTensor {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operation kinds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Gelu,
    Scale(f64),
    Exp,
    Log,
    L2NormalizeRows,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(GraphTensor, GraphTensor),
    Add(GraphTensor, GraphTensor, bool),
    Sub(GraphTensor, GraphTensor, bool),
    Mul(GraphTensor, GraphTensor, bool),
    Relu(GraphTensor),
    Gelu(GraphTensor),
    Tanh(GraphTensor),
    Scale(GraphTensor, f64),
    Exp(GraphTensor),
    Log(GraphTensor),
    L2NormalizeRows(GraphTensor),
    SoftmaxRows(GraphTensor),
    LogSumExpRows(GraphTensor),
    LayerNormRows(GraphTensor),
    Transpose(GraphTensor),
    Slice {
        src: GraphTensor,
        row0: usize,
        col0: usize,
    },
    ConcatRows(Vec<GraphTensor>),
    ConcatCols(Vec<GraphTensor>),
    Reshape(GraphTensor),
    SumAll(GraphTensor),
    MeanAll(GraphTensor),
    SumCols(GraphTensor),
    GatherRows(GraphTensor, Vec<usize>),
}

impl Op {
    fn parents(&self) -> Vec<GraphTensor> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b, _) | Sub(a, b, _) | Mul(a, b, _) => vec![*a, *b],
            Relu(a) | Gelu(a) | Tanh(a) | Scale(a, _) | Exp(a) | Log(a) | L2NormalizeRows(a)
            | SoftmaxRows(a) | LogSumExpRows(a) | LayerNormRows(a) | Transpose(a)
            | Reshape(a) | SumAll(a) | MeanAll(a) | SumCols(a) | GatherRows(a, _) => vec![*a],
            Slice { src, .. } => vec![*src],
            ConcatRows(xs) | ConcatCols(xs) => xs.clone(),
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            MatMul(..) => "matmul",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Relu(_) => "relu",
            Gelu(_) => "gelu",
            Tanh(_) => "tanh",
            Scale(..) => "scale",
            Exp(_) => "exp",
            Log(_) => "log",
            L2NormalizeRows(_) => "l2_normalize_rows",
            SoftmaxRows(_) => "softmax_rows",
            LogSumExpRows(_) => "logsumexp_rows",
            LayerNormRows(_) => "layer_norm_rows",
            Transpose(_) => "transpose",
            Slice { .. } => "slice",
            ConcatRows(_) => "concat_rows",
            ConcatCols(_) => "concat_cols",
            Reshape(_) => "reshape",
            SumAll(_) => "sum",
            MeanAll(_) => "mean",
            SumCols(_) => "sum_cols",
            GatherRows(..) => "gather_rows",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    /// True when a gradient must flow into this node.
    requires_grad: bool,
    /// True when the caller wants this node's gradient reported.
    watched: bool,
}

/// Gradients keyed by tensor handle. Only watched tensors (leaves created
/// with `requires_grad` and nodes passed to [`Graph::retain_grad`]) appear.
#[derive(Debug, Clone, Default)]
pub struct GradientMap {
    grads: HashMap<GraphTensor, Vec<f64>>,
}

impl GradientMap {
    pub fn get(&self, t: GraphTensor) -> Option<&[f64]> {
        self.grads.get(&t).map(Vec::as_slice)
    }

    pub fn take(&mut self, t: GraphTensor) -> Option<Vec<f64>> {
        self.grads.remove(&t)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn contains(&self, t: GraphTensor) -> bool {
        self.grads.contains_key(&t)
    }
}

const LAYER_NORM_EPS: f64 = 1e-12;

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [c] => (1, *c),
        _ => {
            let cols = *shape.last().unwrap();
            (shape[..shape.len() - 1].iter().product(), cols)
        }
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn node(&self, t: GraphTensor) -> &Node {
        &self.nodes[t.0]
    }

    pub fn shape(&self, t: GraphTensor) -> &[usize] {
        &self.node(t).shape
    }

    pub fn value(&self, t: GraphTensor) -> &[f64] {
        &self.node(t).value
    }

    pub fn requires_grad(&self, t: GraphTensor) -> bool {
        self.node(t).requires_grad
    }

    /// Name of the operation that produced `t`.
    pub fn op_name(&self, t: GraphTensor) -> &'static str {
        self.node(t).op.name()
    }

    /// Handles of the tensors `t` was computed from.
    pub fn parents(&self, t: GraphTensor) -> Vec<GraphTensor> {
        self.node(t).op.parents()
    }

    /// Copies `t` out as a matrix using the row view of its shape.
    pub fn to_matrix(&self, t: GraphTensor) -> Matrix {
        let (r, c) = rows_cols(self.shape(t));
        Matrix::new(r, c, self.value(t).to_vec()).expect("row view is consistent")
    }

    pub fn scalar(&self, t: GraphTensor) -> f64 {
        self.value(t)[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> GraphTensor {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { shape, value, op, requires_grad, watched: false });
        GraphTensor(self.nodes.len() - 1)
    }

    /// Adds a leaf. Leaves created with `requires_grad` are reported by
    /// [`Graph::backward`].
    pub fn leaf(&mut self, shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<GraphTensor> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(TensorError::Shape { op: "leaf", left: shape.to_vec(), right: vec![values.len()] });
        }
        self.nodes.push(Node {
            shape: shape.to_vec(),
            value: values,
            op: Op::Leaf,
            requires_grad,
            watched: requires_grad,
        });
        Ok(GraphTensor(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<GraphTensor> {
        self.leaf(shape, values, false)
    }

    pub fn constant_matrix(&mut self, m: &Matrix) -> GraphTensor {
        self.leaf(&m.shape(), m.data().to_vec(), false).expect("matrix shape is consistent")
    }

    /// Asks backward to report the gradient of an intermediate node.
    pub fn retain_grad(&mut self, t: GraphTensor) {
        let node = &mut self.nodes[t.0];
        if node.requires_grad {
            node.watched = true;
        }
    }

    /// Marks an intermediate node as a differentiation target even when no
    /// parameter below it requires gradients.
    pub fn watch(&mut self, t: GraphTensor) -> GraphTensor {
        if self.node(t).requires_grad {
            self.retain_grad(t);
            return t;
        }
        let shape = self.node(t).shape.clone();
        let value = self.node(t).value.clone();
        self.leaf(&shape, value, true).expect("shape copied from node")
    }

    pub fn matmul(&mut self, a: GraphTensor, b: GraphTensor) -> Result<GraphTensor> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape { op: "matmul", left: sa, right: sb });
        }
        if !self.value(a).iter().chain(self.value(b)).all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "matmul" });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, 0.0);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    /// Returns whether `b` broadcasts as a row over `a`, or errors.
    fn binary_layout(&self, op: &'static str, a: GraphTensor, b: GraphTensor) -> Result<bool> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(false);
        }
        let (_, cols) = rows_cols(sa);
        let row_like = match sb {
            [c] => *c == cols,
            [1, c] => *c == cols,
            _ => false,
        };
        if row_like {
            Ok(true)
        } else {
            Err(TensorError::Shape { op, left: sa.to_vec(), right: sb.to_vec() })
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: GraphTensor,
        b: GraphTensor,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(GraphTensor, GraphTensor, bool) -> Op,
    ) -> Result<GraphTensor> {
        let bcast = self.binary_layout(op, a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let out: Vec<f64> = if bcast {
            let cols = bv.len();
            av.iter().enumerate().map(|(i, &x)| f(x, bv[i % cols])).collect()
        } else {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        };
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, make(a, b, bcast)))
    }

    pub fn add(&mut self, a: GraphTensor, b: GraphTensor) -> Result<GraphTensor> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: GraphTensor, b: GraphTensor) -> Result<GraphTensor> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: GraphTensor, b: GraphTensor) -> Result<GraphTensor> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, a: GraphTensor, f: impl Fn(f64) -> f64, op: Op) -> GraphTensor {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op)
    }

    pub fn relu(&mut self, a: GraphTensor) -> GraphTensor {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Exact GELU, `0.5 x (1 + erf(x / sqrt 2))`.
    pub fn gelu(&mut self, a: GraphTensor) -> GraphTensor {
        self.unary(a, |x| x * std_normal_cdf(x), Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: GraphTensor) -> GraphTensor {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn scale(&mut self, a: GraphTensor, factor: f64) -> GraphTensor {
        self.unary(a, |x| x * factor, Op::Scale(a, factor))
    }

    pub fn exp(&mut self, a: GraphTensor) -> GraphTensor {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: GraphTensor) -> Result<GraphTensor> {
        if let Some(bad) = self.value(a).iter().find(|&&x| !(x > 0.0)) {
            return Err(TensorError::Domain { op: "log", detail: format!("input {bad} is not positive") });
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn l2_normalize_rows(&mut self, a: GraphTensor) -> Result<GraphTensor> {
        let (_, cols) = rows_cols(self.shape(a));
        let mut out = self.value(a).to_vec();
        for (i, row) in out.chunks_exact_mut(cols.max(1)).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(TensorError::Domain {
                    op: "l2_normalize_rows",
                    detail: format!("row {i} has norm {norm}"),
                });
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::L2NormalizeRows(a)))
    }

    /// Dispatches one of the elementwise kinds. Binary kinds require `b`.
    pub fn elementwise(&mut self, kind: Elementwise, a: GraphTensor, b: Option<GraphTensor>) -> Result<GraphTensor> {
        let need_b = |b: Option<GraphTensor>| {
            b.ok_or(TensorError::Contract { op: "elementwise", detail: format!("{kind:?} needs a second operand") })
        };
        match kind {
            Elementwise::Add => self.add(a, need_b(b)?),
            Elementwise::Sub => self.sub(a, need_b(b)?),
            Elementwise::Mul => self.mul(a, need_b(b)?),
            Elementwise::Relu => Ok(self.relu(a)),
            Elementwise::Gelu => Ok(self.gelu(a)),
            Elementwise::Scale(f) => Ok(self.scale(a, f)),
            Elementwise::Exp => Ok(self.exp(a)),
            Elementwise::Log => self.log(a),
            Elementwise::L2NormalizeRows => self.l2_normalize_rows(a),
        }
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: GraphTensor) -> Result<GraphTensor> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Contract { op: "softmax_rows", detail: format!("expected 2-d input, got {shape:?}") });
        }
        let cols = shape[1];
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(cols.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        Ok(self.push(shape, out, Op::SoftmaxRows(a)))
    }

    /// Row-wise `log(sum(exp(x)))`, stabilized; output is `[rows, 1]`.
    pub fn logsumexp_rows(&mut self, a: GraphTensor) -> GraphTensor {
        let (rows, cols) = rows_cols(self.shape(a));
        let out: Vec<f64> = self
            .value(a)
            .chunks_exact(cols.max(1))
            .map(|row| {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
            })
            .collect();
        self.push(vec![rows, 1], out, Op::LogSumExpRows(a))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: GraphTensor) -> GraphTensor {
        let (_, cols) = rows_cols(self.shape(a));
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(cols.max(1)) {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::LayerNormRows(a))
    }

    pub fn transpose(&mut self, a: GraphTensor) -> GraphTensor {
        let (r, c) = rows_cols(self.shape(a));
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(vec![c, r], out, Op::Transpose(a))
    }

    /// Copies the block `rows x cols` of the row view of `a`.
    pub fn slice(
        &mut self,
        a: GraphTensor,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    ) -> Result<GraphTensor> {
        let (r, c) = rows_cols(self.shape(a));
        if rows.start > rows.end || cols.start > cols.end || rows.end > r || cols.end > c {
            return Err(TensorError::Shape {
                op: "slice",
                left: vec![r, c],
                right: vec![rows.start, rows.end, cols.start, cols.end],
            });
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for i in rows.clone() {
            out.extend_from_slice(&src[i * c + cols.start..i * c + cols.end]);
        }
        Ok(self.push(
            vec![rows.len(), cols.len()],
            out,
            Op::Slice { src: a, row0: rows.start, col0: cols.start },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[GraphTensor]) -> Result<GraphTensor> {
        let cols = parts.first().map(|&p| rows_cols(self.shape(p)).1).unwrap_or(0);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p));
            if c != cols {
                return Err(TensorError::Shape { op: "concat_rows", left: vec![cols], right: vec![c] });
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[GraphTensor]) -> Result<GraphTensor> {
        let rows = parts.first().map(|&p| rows_cols(self.shape(p)).0).unwrap_or(0);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p));
            if r != rows {
                return Err(TensorError::Shape { op: "concat_cols", left: vec![rows], right: vec![r] });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn reshape(&mut self, a: GraphTensor, shape: &[usize]) -> Result<GraphTensor> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(TensorError::Shape { op: "reshape", left: self.shape(a).to_vec(), right: shape.to_vec() });
        }
        let value = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a)))
    }

    pub fn sum(&mut self, a: GraphTensor) -> GraphTensor {
        let s = self.value(a).iter().sum();
        self.push(vec![1], vec![s], Op::SumAll(a))
    }

    pub fn mean(&mut self, a: GraphTensor) -> GraphTensor {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        self.push(vec![1], vec![s], Op::MeanAll(a))
    }

    /// Sums each row; output is `[rows, 1]`.
    pub fn sum_cols(&mut self, a: GraphTensor) -> GraphTensor {
        let (rows, cols) = rows_cols(self.shape(a));
        let out = self.value(a).chunks_exact(cols.max(1)).map(|r| r.iter().sum()).collect();
        self.push(vec![rows, 1], out, Op::SumCols(a))
    }

    /// Picks rows of a 2-d table by index (embedding lookup).
    pub fn gather_rows(&mut self, table: GraphTensor, indices: &[usize]) -> Result<GraphTensor> {
        let (r, c) = rows_cols(self.shape(table));
        if let Some(pos) = indices.iter().position(|&i| i >= r) {
            return Err(TensorError::Contract {
                op: "gather_rows",
                detail: format!("index {} at position {pos} out of range for {r} rows", indices[pos]),
            });
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        Ok(self.push(vec![indices.len(), c], out, Op::GatherRows(table, indices.to_vec())))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: GraphTensor) -> Result<GradientMap> {
        let root_shape = self.shape(root);
        if self.value(root).len() != 1 {
            return Err(TensorError::NonScalarRoot(root_shape.to_vec()));
        }
        let mut out = GradientMap::default();
        if !self.node(root).requires_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            if node.watched {
                out.grads.insert(GraphTensor(idx), g);
            }
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |t: GraphTensor| self.nodes[t.0].requires_grad;
        let mut acc = |t: GraphTensor, f: &mut dyn FnMut(&mut [f64])| {
            if !needs(t) {
                return;
            }
            let slot = grads[t.0].get_or_insert_with(|| vec![0.0; self.nodes[t.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |da| gemm(m, n, k, g, false, bv, true, da, 1.0));
                acc(*b, &mut |db| gemm(k, m, n, av, true, g, false, db, 1.0));
            }
            Op::Add(a, b, bcast) | Op::Sub(a, b, bcast) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d += x));
                acc(*b, &mut |db| {
                    if *bcast {
                        let cols = db.len();
                        for (i, &x) in g.iter().enumerate() {
                            db[i % cols] += sign * x;
                        }
                    } else {
                        db.iter_mut().zip(g).for_each(|(d, &x)| *d += sign * x);
                    }
                });
            }
            Op::Mul(a, b, bcast) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let cols = bv.len();
                acc(*a, &mut |da| {
                    for (i, d) in da.iter_mut().enumerate() {
                        let bi = if *bcast { bv[i % cols] } else { bv[i] };
                        *d += g[i] * bi;
                    }
                });
                acc(*b, &mut |db| {
                    for (i, &x) in g.iter().enumerate() {
                        let j = if *bcast { i % cols } else { i };
                        db[j] += x * av[i];
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        if x[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * (std_normal_cdf(x[i]) + x[i] * std_normal_pdf(x[i]));
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Scale(a, f) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &x)| *d += f * x)),
            Op::Exp(a) => {
                let y = &node.value;
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i];
                    }
                });
            }
            Op::Log(a) => {
                let x = self.value(*a);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / x[i];
                    }
                });
            }
            Op::L2NormalizeRows(a) => {
                let x = self.value(*a);
                let y = &node.value;
                let (_, cols) = rows_cols(&node.shape);
                acc(*a, &mut |d| {
                    for r in 0..d.len() / cols.max(1) {
                        let span = r * cols..(r + 1) * cols;
                        let norm = x[span.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = y[span.clone()].iter().zip(&g[span.clone()]).map(|(a, b)| a * b).sum();
                        for i in span {
                            d[i] += (g[i] - y[i] * dot) / norm;
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let cols = node.shape[1];
                acc(*a, &mut |d| {
                    for r in 0..d.len() / cols.max(1) {
                        let span = r * cols..(r + 1) * cols;
                        let dot: f64 = y[span.clone()].iter().zip(&g[span.clone()]).map(|(a, b)| a * b).sum();
                        for i in span {
                            d[i] += y[i] * (g[i] - dot);
                        }
                    }
                });
            }
            Op::LogSumExpRows(a) => {
                let x = self.value(*a);
                let (_, cols) = rows_cols(self.shape(*a));
                acc(*a, &mut |d| {
                    for (r, &lse) in node.value.iter().enumerate() {
                        for i in r * cols..(r + 1) * cols {
                            d[i] += g[r] * (x[i] - lse).exp();
                        }
                    }
                });
            }
            Op::LayerNormRows(a) => {
                let x = self.value(*a);
                let y = &node.value;
                let (_, cols) = rows_cols(&node.shape);
                acc(*a, &mut |d| {
                    let n = cols as f64;
                    for r in 0..d.len() / cols.max(1) {
                        let span = r * cols..(r + 1) * cols;
                        let xs = &x[span.clone()];
                        let mean = xs.iter().sum::<f64>() / n;
                        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let g_mean = g[span.clone()].iter().sum::<f64>() / n;
                        let gy_mean = g[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| a * b).sum::<f64>() / n;
                        for i in span {
                            d[i] += inv * (g[i] - g_mean - y[i] * gy_mean);
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = rows_cols(self.shape(*a));
                acc(*a, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Slice { src, row0, col0 } => {
                let (_, c) = rows_cols(self.shape(*src));
                let (rows, cols) = (node.shape[0], node.shape[1]);
                acc(*src, &mut |d| {
                    for i in 0..rows {
                        let dst = (row0 + i) * c + col0;
                        for j in 0..cols {
                            d[dst + j] += g[i * cols + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let seg = &g[offset..offset + len];
                    acc(p, &mut |d| d.iter_mut().zip(seg).for_each(|(d, &x)| *d += x));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut col0 = 0;
                for &p in parts {
                    let (rows, w) = rows_cols(self.shape(p));
                    acc(p, &mut |d| {
                        for i in 0..rows {
                            for j in 0..w {
                                d[i * w + j] += g[i * total + col0 + j];
                            }
                        }
                    });
                    col0 += w;
                }
            }
            Op::Reshape(a) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &x)| *d += x)),
            Op::SumAll(a) => acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::MeanAll(a) => {
                let n = self.value(*a).len().max(1) as f64;
                acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::SumCols(a) => {
                let (_, cols) = rows_cols(self.shape(*a));
                acc(*a, &mut |d| {
                    for (i, d) in d.iter_mut().enumerate() {
                        *d += g[i / cols.max(1)];
                    }
                });
            }
            Op::GatherRows(table, indices) => {
                let (_, c) = rows_cols(self.shape(*table));
                acc(*table, &mut |d| {
                    for (k, &i) in indices.iter().enumerate() {
                        for j in 0..c {
                            d[i * c + j] += g[k * c + j];
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests;
