//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every tensor created during one forward pass
//! (define-by-run); [`Tape::backward`] walks the recorded primitives in
//! reverse and accumulates gradients into the leaves that requested them.
//! Tensors are row-major `f64` buffers of rank 0 (scalar), 1 or 2; the
//! only implicit broadcasting is a trailing `[n]` (or scalar) operand
//! against a `[batch, n]` one.
//!
//! Values are checked for NaN/Inf after every primitive, so a diverging
//! objective surfaces as an error at the op that produced it instead of
//! poisoning downstream buffers.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::linalg;
use crate::math;

/// Handle to a tensor on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Primitive operations. Attributes ride along with the kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Square,
    Abs,
    Sqrt,
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    Broadcast { axis: usize, count: usize },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    LeakyRelu { slope: f64 },
    Sigmoid,
    Softplus,
    Tanh,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Square => "square",
            Op::Abs => "abs",
            Op::Sqrt => "sqrt",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Broadcast { .. } => "broadcast",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::Tanh => "tanh",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },
    Domain {
        op: &'static str,
        value: f64,
    },
    NonFinite {
        op: &'static str,
    },
    LengthMismatch {
        expected: usize,
        got: usize,
    },
    BackwardOnNonScalar {
        shape: Vec<usize>,
    },
    BackwardTwice,
    NonDeterministic,
    WrongArity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shapes {lhs:?} and {rhs:?} do not conform")
            }
            TensorError::BadShape { op, shape, detail } => {
                write!(f, "{op}: unsupported shape {shape:?} ({detail})")
            }
            TensorError::Domain { op, value } => {
                write!(f, "{op}: value {value} outside domain")
            }
            TensorError::NonFinite { op } => {
                write!(f, "{op}: produced a non-finite value")
            }
            TensorError::LengthMismatch { expected, got } => {
                write!(f, "tensor data length {got} does not match shape product {expected}")
            }
            TensorError::BackwardOnNonScalar { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            TensorError::BackwardTwice => {
                write!(f, "backward called twice on the same tape without reset")
            }
            TensorError::NonDeterministic => {
                write!(f, "function under finite-difference check is not deterministic")
            }
            TensorError::WrongArity { op, expected, got } => {
                write!(f, "{op}: expected {expected} inputs, got {got}")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for TensorError {}

enum Record {
    Leaf,
    Applied { op: Op, inputs: Vec<TensorId> },
}

struct Node {
    values: Vec<f64>,
    shape: Vec<usize>,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
    record: Record,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// A reverse-mode tape. Confined to one worker; create a fresh tape (or
/// [`Tape::clear`]) per forward/backward cycle.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Drop all nodes and re-arm backward.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf tensor.
    pub fn leaf(
        &mut self,
        values: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
    ) -> Result<TensorId, TensorError> {
        if values.len() != numel(&shape) {
            return Err(TensorError::LengthMismatch {
                expected: numel(&shape),
                got: values.len(),
            });
        }
        if shape.len() > 2 {
            return Err(TensorError::BadShape {
                op: "leaf",
                shape,
                detail: String::from("rank above 2 is not supported"),
            });
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            values,
            shape,
            needs_grad: requires_grad,
            grad: None,
            record: Record::Leaf,
        });
        Ok(TensorId(id))
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, values: Vec<f64>, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        self.leaf(values, shape, false)
    }

    /// Rank-0 constant.
    pub fn scalar(&mut self, value: f64) -> TensorId {
        self.leaf(vec![value], vec![], false).expect("scalar leaf")
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        self.nodes[id.0].values[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, values: Vec<f64>, shape: Vec<usize>, op: Op, inputs: Vec<TensorId>) -> Result<TensorId, TensorError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let needs = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        let id = self.nodes.len();
        self.nodes.push(Node {
            values,
            shape,
            needs_grad: needs,
            grad: None,
            record: if needs {
                Record::Applied { op, inputs }
            } else {
                Record::Leaf
            },
        });
        Ok(TensorId(id))
    }

    // ── primitive dispatch ──────────────────────────────────────────

    /// Apply a primitive to a list of inputs. Convenience wrappers below
    /// defer to this single entry point.
    pub fn apply_primitive(&mut self, op: Op, inputs: &[TensorId]) -> Result<TensorId, TensorError> {
        let want = |n: usize| -> Result<(), TensorError> {
            if inputs.len() != n {
                Err(TensorError::WrongArity {
                    op: op.name(),
                    expected: n,
                    got: inputs.len(),
                })
            } else {
                Ok(())
            }
        };
        match op {
            Op::MatMul => {
                want(2)?;
                self.matmul_impl(inputs[0], inputs[1])
            }
            Op::Add | Op::Sub | Op::Mul | Op::Div => {
                want(2)?;
                self.binary_impl(op, inputs[0], inputs[1])
            }
            Op::Neg
            | Op::Exp
            | Op::Log
            | Op::Square
            | Op::Abs
            | Op::Sqrt
            | Op::LeakyRelu { .. }
            | Op::Sigmoid
            | Op::Softplus
            | Op::Tanh => {
                want(1)?;
                self.unary_impl(op, inputs[0])
            }
            Op::Sum { axis } => {
                want(1)?;
                self.reduce_impl(Op::Sum { axis }, inputs[0], axis, false)
            }
            Op::Mean { axis } => {
                want(1)?;
                self.reduce_impl(Op::Mean { axis }, inputs[0], axis, true)
            }
            Op::Broadcast { axis, count } => {
                want(1)?;
                self.broadcast_impl(inputs[0], axis, count)
            }
            Op::Concat { axis } => {
                if inputs.len() < 2 {
                    return Err(TensorError::WrongArity {
                        op: "concat",
                        expected: 2,
                        got: inputs.len(),
                    });
                }
                self.concat_impl(inputs, axis)
            }
            Op::Slice { axis, start, end } => {
                want(1)?;
                self.slice_impl(inputs[0], axis, start, end)
            }
        }
    }

    // ── convenience wrappers ────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.apply_primitive(Op::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.apply_primitive(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.apply_primitive(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.apply_primitive(Op::Mul, &[a, b])
    }
    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.apply_primitive(Op::Div, &[a, b])
    }
    pub fn neg(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.apply_primitive(Op::Neg, &[a])
    }
    pub fn exp(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.apply_primitive(Op::Exp, &[a])
    }
    pub fn log(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.apply_primitive(Op::Log, &[a])
    }
    pub fn square(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.apply_primitive(Op::Square, &[a])
    }
    pub fn abs(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.apply_primitive(Op::Abs, &[a])
    }
    pub fn sqrt(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.apply_primitive(Op::Sqrt, &[a])
    }
    pub fn sum(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.apply_primitive(Op::Sum { axis: None }, &[a])
    }
    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        self.apply_primitive(Op::Sum { axis: Some(axis) }, &[a])
    }
    pub fn mean(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.apply_primitive(Op::Mean { axis: None }, &[a])
    }
    pub fn mean_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        self.apply_primitive(Op::Mean { axis: Some(axis) }, &[a])
    }
    pub fn broadcast(&mut self, a: TensorId, axis: usize, count: usize) -> Result<TensorId, TensorError> {
        self.apply_primitive(Op::Broadcast { axis, count }, &[a])
    }
    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId, TensorError> {
        self.apply_primitive(Op::Concat { axis }, inputs)
    }
    pub fn slice(&mut self, a: TensorId, axis: usize, start: usize, end: usize) -> Result<TensorId, TensorError> {
        self.apply_primitive(Op::Slice { axis, start, end }, &[a])
    }
    pub fn leaky_relu(&mut self, a: TensorId, slope: f64) -> Result<TensorId, TensorError> {
        self.apply_primitive(Op::LeakyRelu { slope }, &[a])
    }
    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.apply_primitive(Op::Sigmoid, &[a])
    }
    pub fn softplus(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.apply_primitive(Op::Softplus, &[a])
    }
    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.apply_primitive(Op::Tanh, &[a])
    }

    /// a + scale * b, a recurring pattern in objective assembly.
    pub fn add_scaled(&mut self, a: TensorId, b: TensorId, scale: f64) -> Result<TensorId, TensorError> {
        if scale == 1.0 {
            return self.add(a, b);
        }
        let s = self.scalar(scale);
        let sb = self.mul(b, s)?;
        self.add(a, sb)
    }

    // ── forward implementations ─────────────────────────────────────

    fn matmul_impl(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (ashape, bshape) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != bshape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ashape.clone(),
                rhs: bshape.clone(),
            });
        }
        let (m, k, n) = (ashape[0], ashape[1], bshape[1]);
        let values = linalg::matmul(&self.nodes[a.0].values, &self.nodes[b.0].values, m, k, n);
        self.push(values, vec![m, n], Op::MatMul, vec![a, b])
    }

    fn binary_impl(&mut self, op: Op, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let out_shape = broadcast_shape(&self.nodes[a.0].shape, &self.nodes[b.0].shape).ok_or(
            TensorError::ShapeMismatch {
                op: op.name(),
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            },
        )?;
        let av = expand(&self.nodes[a.0].values, &self.nodes[a.0].shape, &out_shape);
        let bv = expand(&self.nodes[b.0].values, &self.nodes[b.0].shape, &out_shape);
        let values: Vec<f64> = match op {
            Op::Add => av.iter().zip(&bv).map(|(x, y)| x + y).collect(),
            Op::Sub => av.iter().zip(&bv).map(|(x, y)| x - y).collect(),
            Op::Mul => av.iter().zip(&bv).map(|(x, y)| x * y).collect(),
            Op::Div => av.iter().zip(&bv).map(|(x, y)| x / y).collect(),
            _ => unreachable!(),
        };
        self.push(values, out_shape, op, vec![a, b])
    }

    fn unary_impl(&mut self, op: Op, a: TensorId) -> Result<TensorId, TensorError> {
        let input = &self.nodes[a.0].values;
        let mut values = Vec::with_capacity(input.len());
        for &x in input {
            let y = match &op {
                Op::Neg => -x,
                Op::Exp => math::exp(x),
                Op::Log => {
                    if x <= 0.0 {
                        return Err(TensorError::Domain { op: "log", value: x });
                    }
                    math::ln(x)
                }
                Op::Square => x * x,
                Op::Abs => math::abs(x),
                Op::Sqrt => {
                    if x <= 0.0 {
                        return Err(TensorError::Domain { op: "sqrt", value: x });
                    }
                    math::sqrt(x)
                }
                Op::LeakyRelu { slope } => {
                    if x >= 0.0 {
                        x
                    } else {
                        slope * x
                    }
                }
                Op::Sigmoid => math::sigmoid(x),
                Op::Softplus => math::softplus(x),
                Op::Tanh => math::tanh(x),
                _ => unreachable!(),
            };
            values.push(y);
        }
        let shape = self.nodes[a.0].shape.clone();
        self.push(values, shape, op, vec![a])
    }

    fn reduce_impl(
        &mut self,
        op: Op,
        a: TensorId,
        axis: Option<usize>,
        is_mean: bool,
    ) -> Result<TensorId, TensorError> {
        let shape = self.nodes[a.0].shape.clone();
        let vals = &self.nodes[a.0].values;
        match axis {
            None => {
                let mut s: f64 = vals.iter().sum();
                if is_mean {
                    s /= vals.len() as f64;
                }
                self.push(vec![s], vec![], op, vec![a])
            }
            Some(ax) => {
                match (shape.len(), ax) {
                    (1, 0) => {
                        let mut s: f64 = vals.iter().sum();
                        if is_mean {
                            s /= vals.len() as f64;
                        }
                        self.push(vec![s], vec![], op, vec![a])
                    }
                    (2, 0) => {
                        let (rows, cols) = (shape[0], shape[1]);
                        let mut out = vec![0.0; cols];
                        for r in 0..rows {
                            for c in 0..cols {
                                out[c] += vals[r * cols + c];
                            }
                        }
                        if is_mean {
                            for v in out.iter_mut() {
                                *v /= rows as f64;
                            }
                        }
                        self.push(out, vec![cols], op, vec![a])
                    }
                    (2, 1) => {
                        let (rows, cols) = (shape[0], shape[1]);
                        let mut out = Vec::with_capacity(rows);
                        for r in 0..rows {
                            let mut s: f64 = vals[r * cols..(r + 1) * cols].iter().sum();
                            if is_mean {
                                s /= cols as f64;
                            }
                            out.push(s);
                        }
                        self.push(out, vec![rows], op, vec![a])
                    }
                    _ => Err(TensorError::BadShape {
                        op: op.name(),
                        shape,
                        detail: format!("cannot reduce axis {ax}"),
                    }),
                }
            }
        }
    }

    fn broadcast_impl(&mut self, a: TensorId, axis: usize, count: usize) -> Result<TensorId, TensorError> {
        let shape = self.nodes[a.0].shape.clone();
        let vals = &self.nodes[a.0].values;
        let op = Op::Broadcast { axis, count };
        match (shape.len(), axis) {
            // scalar -> [count]
            (0, 0) => {
                let out = vec![vals[0]; count];
                self.push(out, vec![count], op, vec![a])
            }
            // [n] -> [count, n]: replicate as rows
            (1, 0) => {
                let n = shape[0];
                let mut out = Vec::with_capacity(count * n);
                for _ in 0..count {
                    out.extend_from_slice(vals);
                }
                self.push(out, vec![count, n], op, vec![a])
            }
            // [m] -> [m, count]: replicate as columns
            (1, 1) => {
                let m = shape[0];
                let mut out = Vec::with_capacity(m * count);
                for &v in vals.iter() {
                    out.extend(core::iter::repeat(v).take(count));
                }
                self.push(out, vec![m, count], op, vec![a])
            }
            _ => Err(TensorError::BadShape {
                op: "broadcast",
                shape,
                detail: format!("cannot broadcast along axis {axis}"),
            }),
        }
    }

    fn concat_impl(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId, TensorError> {
        let first_shape = self.nodes[inputs[0].0].shape.clone();
        match (first_shape.len(), axis) {
            (2, 1) => {
                let rows = first_shape[0];
                let mut total_cols = 0;
                for id in inputs {
                    let s = &self.nodes[id.0].shape;
                    if s.len() != 2 || s[0] != rows {
                        return Err(TensorError::ShapeMismatch {
                            op: "concat",
                            lhs: first_shape,
                            rhs: s.clone(),
                        });
                    }
                    total_cols += s[1];
                }
                let mut out = Vec::with_capacity(rows * total_cols);
                for r in 0..rows {
                    for id in inputs {
                        let cols = self.nodes[id.0].shape[1];
                        out.extend_from_slice(&self.nodes[id.0].values[r * cols..(r + 1) * cols]);
                    }
                }
                self.push(out, vec![rows, total_cols], Op::Concat { axis }, inputs.to_vec())
            }
            (2, 0) | (1, 0) => {
                let trailing: &[usize] = &first_shape[1..];
                let mut total_rows = 0;
                let mut out = Vec::new();
                for id in inputs {
                    let s = &self.nodes[id.0].shape;
                    if s.len() != first_shape.len() || &s[1..] != trailing {
                        return Err(TensorError::ShapeMismatch {
                            op: "concat",
                            lhs: first_shape,
                            rhs: s.clone(),
                        });
                    }
                    total_rows += s[0];
                    out.extend_from_slice(&self.nodes[id.0].values);
                }
                let mut shape = vec![total_rows];
                shape.extend_from_slice(trailing);
                self.push(out, shape, Op::Concat { axis }, inputs.to_vec())
            }
            _ => Err(TensorError::BadShape {
                op: "concat",
                shape: first_shape,
                detail: format!("cannot concatenate along axis {axis}"),
            }),
        }
    }

    fn slice_impl(&mut self, a: TensorId, axis: usize, start: usize, end: usize) -> Result<TensorId, TensorError> {
        let shape = self.nodes[a.0].shape.clone();
        let op = Op::Slice { axis, start, end };
        let bad = |detail: String| TensorError::BadShape {
            op: "slice",
            shape: shape.clone(),
            detail,
        };
        if start >= end {
            return Err(bad(format!("empty range {start}..{end}")));
        }
        match (shape.len(), axis) {
            (1, 0) => {
                if end > shape[0] {
                    return Err(bad(format!("range {start}..{end} exceeds length {}", shape[0])));
                }
                let out = self.nodes[a.0].values[start..end].to_vec();
                self.push(out, vec![end - start], op, vec![a])
            }
            (2, 0) => {
                let (rows, cols) = (shape[0], shape[1]);
                if end > rows {
                    return Err(bad(format!("row range {start}..{end} exceeds {rows}")));
                }
                let out = self.nodes[a.0].values[start * cols..end * cols].to_vec();
                self.push(out, vec![end - start, cols], op, vec![a])
            }
            (2, 1) => {
                let (rows, cols) = (shape[0], shape[1]);
                if end > cols {
                    return Err(bad(format!("column range {start}..{end} exceeds {cols}")));
                }
                let width = end - start;
                let mut out = Vec::with_capacity(rows * width);
                for r in 0..rows {
                    out.extend_from_slice(&self.nodes[a.0].values[r * cols + start..r * cols + end]);
                }
                self.push(out, vec![rows, width], op, vec![a])
            }
            _ => Err(bad(format!("cannot slice axis {axis}"))),
        }
    }

    // ── backward ────────────────────────────────────────────────────

    fn accumulate(&mut self, id: TensorId, contribution: &[f64]) {
        let node = &mut self.nodes[id.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (gv, cv) in g.iter_mut().zip(contribution) {
                    *gv += cv;
                }
            }
            None => node.grad = Some(contribution.to_vec()),
        }
    }

    /// Populate `grad` for every reachable leaf with `requires_grad`.
    /// The loss must be a scalar (shape `[]`); gradients from fan-out
    /// accumulate additively.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if !self.nodes[loss.0].shape.is_empty() {
            return Err(TensorError::BackwardOnNonScalar {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        self.backward_done = true;
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            let (op, inputs) = match &self.nodes[i].record {
                Record::Leaf => continue,
                Record::Applied { op, inputs } => (op.clone(), inputs.clone()),
            };
            let g = self.nodes[i].grad.clone().expect("grad present");
            self.backward_op(i, &op, &inputs, &g);
        }
        Ok(())
    }

    fn backward_op(&mut self, out: usize, op: &Op, inputs: &[TensorId], g: &[f64]) {
        match op {
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.nodes[a.0].needs_grad {
                    let bt = linalg::transpose(&self.nodes[b.0].values, k, n);
                    let da = linalg::matmul(g, &bt, m, n, k);
                    self.accumulate(a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    let at = linalg::transpose(&self.nodes[a.0].values, m, k);
                    let db = linalg::matmul(&at, g, k, m, n);
                    self.accumulate(b, &db);
                }
            }
            Op::Add | Op::Sub | Op::Mul | Op::Div => {
                let (a, b) = (inputs[0], inputs[1]);
                let out_shape = self.nodes[out].shape.clone();
                let ashape = self.nodes[a.0].shape.clone();
                let bshape = self.nodes[b.0].shape.clone();
                let (da_full, db_full): (Vec<f64>, Vec<f64>) = match op {
                    Op::Add => (g.to_vec(), g.to_vec()),
                    Op::Sub => (g.to_vec(), g.iter().map(|x| -x).collect()),
                    Op::Mul => {
                        let av = expand(&self.nodes[a.0].values, &ashape, &out_shape);
                        let bv = expand(&self.nodes[b.0].values, &bshape, &out_shape);
                        (
                            g.iter().zip(&bv).map(|(gv, y)| gv * y).collect(),
                            g.iter().zip(&av).map(|(gv, x)| gv * x).collect(),
                        )
                    }
                    Op::Div => {
                        let av = expand(&self.nodes[a.0].values, &ashape, &out_shape);
                        let bv = expand(&self.nodes[b.0].values, &bshape, &out_shape);
                        (
                            g.iter().zip(&bv).map(|(gv, y)| gv / y).collect(),
                            g.iter()
                                .zip(av.iter().zip(&bv))
                                .map(|(gv, (x, y))| -gv * x / (y * y))
                                .collect(),
                        )
                    }
                    _ => unreachable!(),
                };
                if self.nodes[a.0].needs_grad {
                    let da = reduce_to(&da_full, &out_shape, &ashape);
                    self.accumulate(a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    let db = reduce_to(&db_full, &out_shape, &bshape);
                    self.accumulate(b, &db);
                }
            }
            Op::Neg => {
                let da: Vec<f64> = g.iter().map(|x| -x).collect();
                self.accumulate(inputs[0], &da);
            }
            Op::Exp => {
                let da: Vec<f64> = g.iter().zip(&self.nodes[out].values).map(|(gv, y)| gv * y).collect();
                self.accumulate(inputs[0], &da);
            }
            Op::Log => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[inputs[0].0].values)
                    .map(|(gv, x)| gv / x)
                    .collect();
                self.accumulate(inputs[0], &da);
            }
            Op::Square => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[inputs[0].0].values)
                    .map(|(gv, x)| 2.0 * gv * x)
                    .collect();
                self.accumulate(inputs[0], &da);
            }
            Op::Abs => {
                // Subgradient at 0 is the right-hand derivative, +1.
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[inputs[0].0].values)
                    .map(|(gv, x)| if *x >= 0.0 { *gv } else { -gv })
                    .collect();
                self.accumulate(inputs[0], &da);
            }
            Op::Sqrt => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[out].values)
                    .map(|(gv, y)| gv / (2.0 * y))
                    .collect();
                self.accumulate(inputs[0], &da);
            }
            Op::LeakyRelu { slope } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[inputs[0].0].values)
                    .map(|(gv, x)| if *x >= 0.0 { *gv } else { gv * slope })
                    .collect();
                self.accumulate(inputs[0], &da);
            }
            Op::Sigmoid => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[out].values)
                    .map(|(gv, s)| gv * s * (1.0 - s))
                    .collect();
                self.accumulate(inputs[0], &da);
            }
            Op::Softplus => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[inputs[0].0].values)
                    .map(|(gv, x)| gv * math::sigmoid(*x))
                    .collect();
                self.accumulate(inputs[0], &da);
            }
            Op::Tanh => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[out].values)
                    .map(|(gv, t)| gv * (1.0 - t * t))
                    .collect();
                self.accumulate(inputs[0], &da);
            }
            Op::Sum { axis } | Op::Mean { axis } => {
                let a = inputs[0];
                let in_shape = self.nodes[a.0].shape.clone();
                let in_numel = numel(&in_shape);
                let is_mean = matches!(op, Op::Mean { .. });
                let mut da = vec![0.0; in_numel];
                match axis {
                    None => {
                        let scale = if is_mean { 1.0 / in_numel as f64 } else { 1.0 };
                        let gv = g[0] * scale;
                        da.iter_mut().for_each(|d| *d = gv);
                    }
                    Some(ax) => match (in_shape.len(), ax) {
                        (1, 0) => {
                            let scale = if is_mean { 1.0 / in_numel as f64 } else { 1.0 };
                            let gv = g[0] * scale;
                            da.iter_mut().for_each(|d| *d = gv);
                        }
                        (2, 0) => {
                            let (rows, cols) = (in_shape[0], in_shape[1]);
                            let scale = if is_mean { 1.0 / rows as f64 } else { 1.0 };
                            for r in 0..rows {
                                for c in 0..cols {
                                    da[r * cols + c] = g[c] * scale;
                                }
                            }
                        }
                        (2, 1) => {
                            let (rows, cols) = (in_shape[0], in_shape[1]);
                            let scale = if is_mean { 1.0 / cols as f64 } else { 1.0 };
                            for r in 0..rows {
                                for c in 0..cols {
                                    da[r * cols + c] = g[r] * scale;
                                }
                            }
                        }
                        _ => unreachable!("validated in forward"),
                    },
                }
                self.accumulate(a, &da);
            }
            Op::Broadcast { axis, count } => {
                let a = inputs[0];
                let in_shape = self.nodes[a.0].shape.clone();
                match (in_shape.len(), axis) {
                    (0, 0) => {
                        let da = vec![g.iter().sum::<f64>()];
                        self.accumulate(a, &da);
                    }
                    (1, 0) => {
                        let n = in_shape[0];
                        let mut da = vec![0.0; n];
                        for r in 0..*count {
                            for c in 0..n {
                                da[c] += g[r * n + c];
                            }
                        }
                        self.accumulate(a, &da);
                    }
                    (1, 1) => {
                        let m = in_shape[0];
                        let mut da = vec![0.0; m];
                        for r in 0..m {
                            da[r] = g[r * count..(r + 1) * count].iter().sum();
                        }
                        self.accumulate(a, &da);
                    }
                    _ => unreachable!("validated in forward"),
                }
            }
            Op::Concat { axis } => {
                let out_shape = self.nodes[out].shape.clone();
                match (out_shape.len(), axis) {
                    (2, 1) => {
                        let rows = out_shape[0];
                        let total_cols = out_shape[1];
                        let mut offset = 0;
                        for id in inputs {
                            let cols = self.nodes[id.0].shape[1];
                            if self.nodes[id.0].needs_grad {
                                let mut da = Vec::with_capacity(rows * cols);
                                for r in 0..rows {
                                    da.extend_from_slice(
                                        &g[r * total_cols + offset..r * total_cols + offset + cols],
                                    );
                                }
                                self.accumulate(*id, &da);
                            }
                            offset += cols;
                        }
                    }
                    _ => {
                        // axis 0 (or rank-1): contiguous blocks
                        let mut offset = 0;
                        for id in inputs {
                            let len = self.nodes[id.0].values.len();
                            if self.nodes[id.0].needs_grad {
                                let da = g[offset..offset + len].to_vec();
                                self.accumulate(*id, &da);
                            }
                            offset += len;
                        }
                    }
                }
            }
            Op::Slice { axis, start, end } => {
                let a = inputs[0];
                let in_shape = self.nodes[a.0].shape.clone();
                let mut da = vec![0.0; numel(&in_shape)];
                match (in_shape.len(), axis) {
                    (1, 0) => {
                        da[*start..*end].copy_from_slice(g);
                    }
                    (2, 0) => {
                        let cols = in_shape[1];
                        da[start * cols..end * cols].copy_from_slice(g);
                    }
                    (2, 1) => {
                        let cols = in_shape[1];
                        let width = end - start;
                        for r in 0..in_shape[0] {
                            da[r * cols + start..r * cols + end]
                                .copy_from_slice(&g[r * width..(r + 1) * width]);
                        }
                    }
                    _ => unreachable!("validated in forward"),
                }
                self.accumulate(a, &da);
            }
        }
    }
}

/// Output shape for an elementwise binary op, or `None` if the shapes do
/// not conform. Broadcasting: identical shapes, a scalar against
/// anything, or `[n]` against `[batch, n]`.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a == b {
        return Some(a.to_vec());
    }
    if a.is_empty() {
        return Some(b.to_vec());
    }
    if b.is_empty() {
        return Some(a.to_vec());
    }
    if a.len() == 2 && b.len() == 1 && a[1] == b[0] {
        return Some(a.to_vec());
    }
    if a.len() == 1 && b.len() == 2 && b[1] == a[0] {
        return Some(b.to_vec());
    }
    None
}

/// Materialize `values` of `shape` at `out_shape` (validated upstream).
fn expand(values: &[f64], shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    if shape == out_shape {
        return values.to_vec();
    }
    let out_n = numel(out_shape);
    if shape.is_empty() {
        return vec![values[0]; out_n];
    }
    // [n] against [batch, n]
    let rows = out_shape[0];
    let mut out = Vec::with_capacity(out_n);
    for _ in 0..rows {
        out.extend_from_slice(values);
    }
    out
}

/// Sum `grad` (at `from_shape`) down to `to_shape`.
fn reduce_to(grad: &[f64], from_shape: &[usize], to_shape: &[usize]) -> Vec<f64> {
    if from_shape == to_shape {
        return grad.to_vec();
    }
    if to_shape.is_empty() {
        return vec![grad.iter().sum()];
    }
    // [batch, n] down to [n]
    let n = to_shape[0];
    let rows = grad.len() / n;
    let mut out = vec![0.0; n];
    for r in 0..rows {
        for c in 0..n {
            out[c] += grad[r * n + c];
        }
    }
    out
}

/// Maximum relative disagreement between the analytic gradient of `f` at
/// `point` and a central finite difference with the given step.
///
/// `f` must build a deterministic scalar from its input tensor; it is
/// evaluated twice to verify determinism before differencing.
pub fn finite_difference_check<F>(f: F, point: &[f64], step: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId, TensorError>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let eval = |values: &[f64], requires_grad: bool| -> Result<(Tape, TensorId, TensorId), TensorError> {
        let mut tape = Tape::new();
        let x = tape.leaf(values.to_vec(), vec![point.len()], requires_grad)?;
        let y = f(&mut tape, x)?;
        if !tape.shape(y).is_empty() {
            return Err(TensorError::BackwardOnNonScalar {
                shape: tape.shape(y).to_vec(),
            });
        }
        Ok((tape, x, y))
    };

    let (mut tape, x, y) = eval(point, true)?;
    let (tape2, _, y2) = eval(point, true)?;
    if tape.scalar_value(y).to_bits() != tape2.scalar_value(y2).to_bits() {
        return Err(TensorError::NonDeterministic);
    }
    tape.backward(y)?;
    let analytic = tape.grad(x).map(|g| g.to_vec()).unwrap_or_default();

    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.to_vec();
        plus[i] += step;
        let mut minus = point.to_vec();
        minus[i] -= step;
        let (tp, _, yp) = eval(&plus, false)?;
        let (tm, _, ym) = eval(&minus, false)?;
        let central = (tp.scalar_value(yp) - tm.scalar_value(ym)) / (2.0 * step);
        let a = analytic.get(i).copied().unwrap_or(0.0);
        let rel = math::abs(a - central) / (math::abs(a) + math::abs(central) + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(tape: &mut Tape, vals: &[f64], shape: &[usize], grad: bool) -> TensorId {
        tape.leaf(vals.to_vec(), shape.to_vec(), grad).unwrap()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::new();
        let a = t(&mut tape, &[1.0, 2.0, 3.0, 4.0], &[2, 2], false);
        let eye = t(&mut tape, &[1.0, 0.0, 0.0, 1.0], &[2, 2], false);
        let c = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn leaky_relu_definition() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[-1.0, 0.0, 2.0], &[3], false);
        let y = tape.leaky_relu(x, 0.01).unwrap();
        assert_eq!(tape.value(y), &[-0.01, 0.0, 2.0]);
    }

    #[test]
    fn sum_square_backward() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[3.0], &[1], true);
        let sq = tape.square(x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn bilinear_backward() {
        let mut tape = Tape::new();
        let a = t(&mut tape, &[1.0, 2.0], &[2], true);
        let b = t(&mut tape, &[3.0, 4.0], &[2], true);
        let prod = tape.mul(a, b).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[3.0, 4.0]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn mean_backward() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[1.0, 2.0, 3.0, 4.0], &[4], true);
        let loss = tape.mean(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn fanout_accumulates() {
        // loss = sum(x*x_again) + sum(x) uses x twice.
        let mut tape = Tape::new();
        let x = t(&mut tape, &[2.0], &[1], true);
        let sq = tape.mul(x, x).unwrap();
        let s1 = tape.sum(sq).unwrap();
        let s2 = tape.sum(x).unwrap();
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[5.0]); // 2x + 1
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[1.0, 2.0], &[2], true);
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::BackwardOnNonScalar { .. }));
    }

    #[test]
    fn backward_twice_rejected() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[1.0], &[1], true);
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(TensorError::BackwardTwice)));
        tape.clear();
        let x = t(&mut tape, &[1.0], &[1], true);
        let loss = tape.sum(x).unwrap();
        assert!(tape.backward(loss).is_ok());
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = t(&mut tape, &[1.0, 2.0], &[2], false);
        let b = t(&mut tape, &[1.0, 2.0, 3.0], &[3], false);
        let err = tape.add(a, b).unwrap_err();
        match err {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2]);
                assert_eq!(rhs, vec![3]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn log_domain_error() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[0.0], &[1], false);
        assert!(matches!(tape.log(x), Err(TensorError::Domain { op: "log", .. })));
        let y = t(&mut tape, &[-1.0], &[1], false);
        assert!(matches!(tape.sqrt(y), Err(TensorError::Domain { op: "sqrt", .. })));
    }

    #[test]
    fn overflow_is_caught() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[1000.0], &[1], false);
        assert!(matches!(tape.exp(x), Err(TensorError::NonFinite { op: "exp" })));
    }

    #[test]
    fn bias_broadcast_add_and_grad() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[1.0, 2.0, 3.0, 4.0], &[2, 2], true);
        let b = t(&mut tape, &[10.0, 20.0], &[2], true);
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.value(y), &[11.0, 22.0, 13.0, 24.0]);
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn concat_slice_roundtrip_with_grads() {
        let mut tape = Tape::new();
        let a = t(&mut tape, &[1.0, 2.0, 3.0, 4.0], &[2, 2], true);
        let b = t(&mut tape, &[5.0, 6.0], &[2, 1], true);
        let cat = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(cat), &[2, 3]);
        assert_eq!(tape.value(cat), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let right = tape.slice(cat, 1, 2, 3).unwrap();
        assert_eq!(tape.value(right), &[5.0, 6.0]);
        let loss = tape.sum(right).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 1.0]);
        assert_eq!(tape.grad(a).unwrap(), &[0.0; 4]);
    }

    #[test]
    fn broadcast_axes() {
        let mut tape = Tape::new();
        let v = t(&mut tape, &[1.0, 2.0], &[2], true);
        let rows = tape.broadcast(v, 0, 3).unwrap();
        assert_eq!(tape.shape(rows), &[3, 2]);
        assert_eq!(tape.value(rows), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let cols = tape.broadcast(v, 1, 3).unwrap();
        assert_eq!(tape.shape(cols), &[2, 3]);
        assert_eq!(tape.value(cols), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let s = tape.sum(cols).unwrap();
        let s2 = tape.sum(rows).unwrap();
        let loss = tape.add(s, s2).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &[6.0, 6.0]);
    }

    #[test]
    fn fd_check_quadratic_is_tiny() {
        let err = finite_difference_check(
            |tape, x| {
                let sq = tape.square(x)?;
                tape.sum(sq)
            },
            &[3.0],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn fd_check_exp_sum() {
        let err = finite_difference_check(
            |tape, x| {
                let s = tape.sum(x)?;
                tape.exp(s)
            },
            &[0.3, -0.7, 0.1],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn fd_check_reports_kink() {
        // abs has a sign discontinuity in the derivative at 0; the check
        // must report the disagreement rather than mask it.
        let err = finite_difference_check(
            |tape, x| {
                let a = tape.abs(x)?;
                tape.sum(a)
            },
            &[0.0],
            1e-5,
        )
        .unwrap();
        assert!(err > 0.9, "kink should produce a large error, got {err}");
    }

    #[test]
    fn replay_is_bit_identical() {
        let build = |tape: &mut Tape| -> TensorId {
            let x = tape
                .leaf(vec![0.3, -0.2, 0.9, 1.4], vec![2, 2], true)
                .unwrap();
            let w = tape
                .leaf(vec![0.5, -1.0, 0.25, 0.75], vec![2, 2], true)
                .unwrap();
            let h = tape.matmul(x, w).unwrap();
            let a = tape.tanh(h).unwrap();
            let e = tape.exp(a).unwrap();
            tape.sum(e).unwrap()
        };
        let mut t1 = Tape::new();
        let y1 = build(&mut t1);
        let mut t2 = Tape::new();
        let y2 = build(&mut t2);
        assert_eq!(
            t1.scalar_value(y1).to_bits(),
            t2.scalar_value(y2).to_bits()
        );
    }
}
