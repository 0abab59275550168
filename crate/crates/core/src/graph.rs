//! Reverse-mode automatic differentiation over a finite operation catalog.
//!
//! A [`Graph`] is a single-use tape: every operation appends a node holding
//! its forward value, and [`Graph::backward`] walks the nodes in reverse
//! insertion order (which is a topological order) exactly once.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::TensorError;
use crate::math;
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// The operation catalog.
///
/// Shape rules:
/// - `MatMul`: `[m, k] x [k, n] -> [m, n]`
/// - `Add`, `Sub`, `Mul`: identical shapes, element-wise
/// - `AddBias`: `[.., c] + [c]`, bias broadcast over leading axes
/// - `Reshape`: same element count
/// - `Concat(axis)`: equal extents except along `axis`
/// - `Transpose`: swaps the last two axes
/// - `Sum`, `Mean`: reduce to a scalar; `SumAxis`, `L2Norm` drop one axis
/// - `CosineSimilarityMatrix`: `[n, d] x [m, d] -> [n, m]`
/// - `Conv1dDepthwise`: `x [n, c, l]`, `kernel [c, k]`, `bias [c]` -> `[n, c, l]`;
///   kernel column `j` weights the input `j` steps in the past (causal)
/// - `SelectiveScan`: `x [n, l, c]`, `delta [n, l, c]`, `a [c, s]`,
///   `b [n, l, s]`, `c [n, l, s]`, `d [c]` -> `[n, l, c]`
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    AddScalar(f64),
    AddBias,
    Reshape(Vec<usize>),
    Concat(usize),
    Slice { axis: usize, start: usize, end: usize },
    Transpose,
    Sum,
    SumAxis(usize),
    Mean,
    Exp,
    Log,
    Softplus,
    Sigmoid,
    Silu,
    Relu,
    Square,
    ClampMin(f64),
    L2Norm(usize),
    CosineSimilarityMatrix,
    Conv1dDepthwise,
    SelectiveScan,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::ScalarMul(_) => "scalar_mul",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::AddBias => "add_bias",
            OpKind::Reshape(_) => "reshape",
            OpKind::Concat(_) => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Transpose => "transpose",
            OpKind::Sum => "sum",
            OpKind::SumAxis(_) => "sum_axis",
            OpKind::Mean => "mean",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Softplus => "softplus",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Silu => "silu",
            OpKind::Relu => "relu",
            OpKind::Square => "square",
            OpKind::ClampMin(_) => "clamp_min",
            OpKind::L2Norm(_) => "l2_norm",
            OpKind::CosineSimilarityMatrix => "cosine_similarity_matrix",
            OpKind::Conv1dDepthwise => "conv1d_depthwise",
            OpKind::SelectiveScan => "selective_scan",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Concat(_) => None,
            OpKind::MatMul
            | OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::AddBias
            | OpKind::CosineSimilarityMatrix => Some(2),
            OpKind::Conv1dDepthwise => Some(3),
            OpKind::SelectiveScan => Some(6),
            _ => Some(1),
        }
    }
}

#[derive(Clone, Debug)]
enum Origin {
    Param,
    Constant,
    Op(OpKind, Vec<Var>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    origin: Origin,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], one per parameter leaf.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a parameter leaf; `None` for constants and intermediate nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// A single-use autodiff tape.
#[derive(Clone, Debug, Default)]
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

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Origin::Param, true)
    }

    /// A leaf treated as a constant by `backward`.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Origin::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, origin: Origin, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            origin,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Runs `kind` on `inputs` and records the result.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var, TensorError> {
        if let Some(n) = kind.arity() {
            if inputs.len() != n {
                return Err(TensorError::Arity {
                    op: kind.name(),
                    expected: n,
                    actual: inputs.len(),
                });
            }
        } else if inputs.is_empty() {
            return Err(TensorError::Arity {
                op: kind.name(),
                expected: 1,
                actual: 0,
            });
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = forward(&kind, &values)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(out, Origin::Op(kind, inputs.to_vec()), requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        self.apply(OpKind::ScalarMul(s), &[a])
    }
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        self.apply(OpKind::AddScalar(s), &[a])
    }
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        self.apply(OpKind::AddBias, &[x, bias])
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        self.apply(OpKind::Reshape(shape.to_vec()), &[a])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        self.apply(OpKind::Concat(axis), parts)
    }
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, TensorError> {
        self.apply(OpKind::Slice { axis, start, end }, &[a])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(OpKind::Transpose, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(OpKind::Sum, &[a])
    }
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.apply(OpKind::SumAxis(axis), &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(OpKind::Mean, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(OpKind::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(OpKind::Log, &[a])
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(OpKind::Softplus, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(OpKind::Sigmoid, &[a])
    }
    pub fn silu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(OpKind::Silu, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(OpKind::Relu, &[a])
    }
    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(OpKind::Square, &[a])
    }
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var, TensorError> {
        self.apply(OpKind::ClampMin(floor), &[a])
    }
    pub fn l2_norm(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.apply(OpKind::L2Norm(axis), &[a])
    }
    pub fn cosine_similarity_matrix(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(OpKind::CosineSimilarityMatrix, &[a, b])
    }
    pub fn conv1d_depthwise(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var, TensorError> {
        self.apply(OpKind::Conv1dDepthwise, &[x, kernel, bias])
    }
    pub fn selective_scan(&mut self, inputs: ScanInputs) -> Result<Var, TensorError> {
        let ScanInputs { x, delta, a, b, c, d } = inputs;
        self.apply(OpKind::SelectiveScan, &[x, delta, a, b, c, d])
    }

    /// Back-propagates from a one-element `loss`.
    ///
    /// Every parameter leaf gets a gradient; leaves the loss does not depend
    /// on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let root = &self.nodes[loss.0].value;
        if root.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: root.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(root.shape(), 1.0));
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Origin::Op(kind, inputs) = &node.origin else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let wanted: Vec<bool> = inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let input_grads = backward_op(kind, &values, &node.value, &g, &wanted);
            for ((v, gi), w) in inputs.iter().zip(input_grads).zip(wanted) {
                if !w {
                    continue;
                }
                let Some(gi) = gi else { continue };
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        // Intermediate gradients were consumed above; only leaves remain.
        for (id, node) in self.nodes.iter().enumerate() {
            match node.origin {
                Origin::Param => {
                    if grads[id].is_none() {
                        grads[id] = Some(Tensor::zeros(node.value.shape()));
                    }
                }
                _ => grads[id] = None,
            }
        }
        Ok(Gradients { grads })
    }
}

/// Operands of [`Graph::selective_scan`].
#[derive(Clone, Copy, Debug)]
pub struct ScanInputs {
    pub x: Var,
    pub delta: Var,
    pub a: Var,
    pub b: Var,
    pub c: Var,
    pub d: Var,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn invalid(op: &'static str, t: &Tensor, reason: &'static str) -> TensorError {
    TensorError::InvalidShape {
        op,
        shape: t.shape().to_vec(),
        reason,
    }
}

/// `(outer, len, inner)` extents around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn drop_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// `C = A * B` with arbitrary strides, through `matrixmultiply`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller guarantees that `a` spans m*k and `b` spans k*n
    // elements under the given strides and that `c` holds m*n values.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    x.map(f)
}

/// Forward rule for one catalog entry.
pub fn forward(kind: &OpKind, inputs: &[&Tensor]) -> Result<Tensor, TensorError> {
    let op = kind.name();
    match kind {
        OpKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(mismatch(op, a, b));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, a.data(), (k as isize, 1), b.data(), (n as isize, 1), &mut out);
            Ok(Tensor::from_parts(vec![m, n], out))
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(mismatch(op, a, b));
            }
            Ok(match kind {
                OpKind::Add => zip_map(a, b, |x, y| x + y),
                OpKind::Sub => zip_map(a, b, |x, y| x - y),
                _ => zip_map(a, b, |x, y| x * y),
            })
        }
        OpKind::ScalarMul(s) => Ok(unary(inputs[0], |x| x * s)),
        OpKind::AddScalar(s) => Ok(unary(inputs[0], |x| x + s)),
        OpKind::AddBias => {
            let (x, b) = (inputs[0], inputs[1]);
            let c = b.len();
            if b.rank() != 1 || x.rank() == 0 || *x.shape().last().unwrap() != c {
                return Err(mismatch(op, x, b));
            }
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(c) {
                for (o, bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            Ok(Tensor::from_parts(x.shape().to_vec(), out))
        }
        OpKind::Reshape(shape) => {
            let x = inputs[0];
            if shape.contains(&0) || numel(shape) != x.len() {
                return Err(TensorError::ShapeMismatch {
                    op,
                    left: x.shape().to_vec(),
                    right: shape.clone(),
                });
            }
            Ok(Tensor::from_parts(shape.clone(), x.data().to_vec()))
        }
        OpKind::Concat(axis) => {
            let first = inputs[0];
            if *axis >= first.rank() {
                return Err(invalid(op, first, "axis out of range"));
            }
            let mut total = 0;
            for t in inputs {
                let same_rank = t.rank() == first.rank();
                let compatible = same_rank
                    && t.shape()
                        .iter()
                        .zip(first.shape())
                        .enumerate()
                        .all(|(i, (a, b))| i == *axis || a == b);
                if !compatible {
                    return Err(mismatch(op, first, t));
                }
                total += t.shape()[*axis];
            }
            let (outer, _, inner) = split_axis(first.shape(), *axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in inputs {
                    let w = t.shape()[*axis] * inner;
                    out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
                }
            }
            let mut shape = first.shape().to_vec();
            shape[*axis] = total;
            Ok(Tensor::from_parts(shape, out))
        }
        OpKind::Slice { axis, start, end } => {
            let x = inputs[0];
            if *axis >= x.rank() {
                return Err(invalid(op, x, "axis out of range"));
            }
            if start >= end || *end > x.shape()[*axis] {
                return Err(invalid(op, x, "slice bounds out of range"));
            }
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let mut out = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                let base = o * len * inner;
                out.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = end - start;
            Ok(Tensor::from_parts(shape, out))
        }
        OpKind::Transpose => {
            let x = inputs[0];
            if x.rank() < 2 {
                return Err(invalid(op, x, "needs rank >= 2"));
            }
            let r = x.rank();
            let (rows, cols) = (x.shape()[r - 2], x.shape()[r - 1]);
            let batch = x.len() / (rows * cols);
            let mut out = vec![0.0; x.len()];
            let src = x.data();
            for bi in 0..batch {
                let base = bi * rows * cols;
                for i in 0..rows {
                    for j in 0..cols {
                        out[base + j * rows + i] = src[base + i * cols + j];
                    }
                }
            }
            let mut shape = x.shape().to_vec();
            shape.swap(r - 2, r - 1);
            Ok(Tensor::from_parts(shape, out))
        }
        OpKind::Sum => Ok(Tensor::scalar(inputs[0].data().iter().sum())),
        OpKind::Mean => {
            let x = inputs[0];
            Ok(Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64))
        }
        OpKind::SumAxis(axis) | OpKind::L2Norm(axis) => {
            let x = inputs[0];
            if *axis >= x.rank() {
                return Err(invalid(op, x, "axis out of range"));
            }
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let square = matches!(kind, OpKind::L2Norm(_));
            let mut out = vec![0.0; outer * inner];
            let src = x.data();
            for o in 0..outer {
                for a in 0..len {
                    let base = (o * len + a) * inner;
                    for i in 0..inner {
                        let v = src[base + i];
                        out[o * inner + i] += if square { v * v } else { v };
                    }
                }
            }
            if square {
                for v in &mut out {
                    *v = math::sqrt(*v) + math::NORM_EPS;
                }
            }
            Ok(Tensor::from_parts(drop_axis(x.shape(), *axis), out))
        }
        OpKind::Exp => Ok(unary(inputs[0], math::exp)),
        OpKind::Log => Ok(unary(inputs[0], math::guarded_ln)),
        OpKind::Softplus => Ok(unary(inputs[0], math::softplus)),
        OpKind::Sigmoid => Ok(unary(inputs[0], math::sigmoid)),
        OpKind::Silu => Ok(unary(inputs[0], math::silu)),
        OpKind::Relu => Ok(unary(inputs[0], |x| x.max(0.0))),
        OpKind::Square => Ok(unary(inputs[0], |x| x * x)),
        OpKind::ClampMin(floor) => Ok(unary(inputs[0], |x| x.max(*floor))),
        OpKind::CosineSimilarityMatrix => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
                return Err(mismatch(op, a, b));
            }
            let an = a.unit_rows();
            let bn = b.unit_rows();
            let (n, d, m) = (a.shape()[0], a.shape()[1], b.shape()[0]);
            let mut out = vec![0.0; n * m];
            gemm(
                n,
                d,
                m,
                an.data(),
                (d as isize, 1),
                bn.data(),
                (1, d as isize),
                &mut out,
            );
            Ok(Tensor::from_parts(vec![n, m], out))
        }
        OpKind::Conv1dDepthwise => conv1d_forward(inputs[0], inputs[1], inputs[2]),
        OpKind::SelectiveScan => {
            let s = ScanShape::check(inputs)?;
            let mut y = vec![0.0; s.n * s.l * s.c];
            let mut h = vec![0.0; s.c * s.s];
            let mut a_bar = vec![0.0; s.c * s.s];
            for n in 0..s.n {
                h.iter_mut().for_each(|v| *v = 0.0);
                for t in 0..s.l {
                    let o = (n * s.l + t) * s.c;
                    s.step(inputs, n, t, &mut h, &mut a_bar, &mut y[o..o + s.c]);
                }
                let block = &y[n * s.l * s.c..(n + 1) * s.l * s.c];
                if let Some(pos) = block.iter().position(|v| !v.is_finite()) {
                    return Err(TensorError::NonFiniteScan {
                        step: pos / s.c,
                        sample: n,
                        channel: pos % s.c,
                    });
                }
            }
            Ok(Tensor::from_parts(vec![s.n, s.l, s.c], y))
        }
    }
}

fn conv1d_forward(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
    let op = "conv1d_depthwise";
    if x.rank() != 3 {
        return Err(invalid(op, x, "input must be [batch, channels, length]"));
    }
    let (n, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if w.rank() != 2 || w.shape()[0] != c {
        return Err(mismatch(op, x, w));
    }
    if bias.shape() != [c] {
        return Err(mismatch(op, x, bias));
    }
    let k = w.shape()[1];
    let (src, wd) = (x.data(), w.data());
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * l;
            let taps = &wd[ci * k..(ci + 1) * k];
            for t in 0..l {
                let mut acc = bias.data()[ci];
                for (j, &wj) in taps.iter().enumerate().take(t + 1) {
                    acc += wj * src[base + t - j];
                }
                out[base + t] = acc;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

struct ScanShape {
    n: usize,
    l: usize,
    c: usize,
    s: usize,
}

impl ScanShape {
    fn check(inputs: &[&Tensor]) -> Result<Self, TensorError> {
        let op = "selective_scan";
        let (x, delta, a, b, c, d) = (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4], inputs[5]);
        if x.rank() != 3 {
            return Err(invalid(op, x, "input must be [batch, length, channels]"));
        }
        if delta.shape() != x.shape() {
            return Err(mismatch(op, x, delta));
        }
        let (n, l, ch) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if a.rank() != 2 || a.shape()[0] != ch {
            return Err(mismatch(op, x, a));
        }
        let s = a.shape()[1];
        if b.shape() != [n, l, s] {
            return Err(mismatch(op, a, b));
        }
        if c.shape() != [n, l, s] {
            return Err(mismatch(op, a, c));
        }
        if d.shape() != [ch] {
            return Err(mismatch(op, x, d));
        }
        Ok(Self { n, l, c: ch, s })
    }

    /// Advances every channel of sample `n` by one position, writing the
    /// outputs (`[c]`) into `out` and the decay factors `exp(dt * a)` into
    /// `a_bar`. `h` and `a_bar` are `[c, s]`.
    #[inline]
    fn step(&self, inputs: &[&Tensor], n: usize, t: usize, h: &mut [f64], a_bar: &mut [f64], out: &mut [f64]) {
        let xo = (n * self.l + t) * self.c;
        let so = (n * self.l + t) * self.s;
        let x = &inputs[0].data()[xo..xo + self.c];
        let dt = &inputs[1].data()[xo..xo + self.c];
        let a = inputs[2].data();
        let b = &inputs[3].data()[so..so + self.s];
        let c = &inputs[4].data()[so..so + self.s];
        let d = inputs[5].data();
        for ch in 0..self.c {
            let r = ch * self.s..(ch + 1) * self.s;
            let (hc, ab, ac) = (&mut h[r.clone()], &mut a_bar[r.clone()], &a[r]);
            let (xv, dv) = (x[ch], dt[ch]);
            let mut acc = 0.0;
            for j in 0..self.s {
                ab[j] = math::exp(dv * ac[j]);
                hc[j] = ab[j] * hc[j] + dv * b[j] * xv;
                acc += c[j] * hc[j];
            }
            out[ch] = acc + d[ch] * xv;
        }
    }
}

/// Backward rule for one catalog entry: gradient for each input whose
/// `wanted` flag is set.
fn backward_op(kind: &OpKind, inputs: &[&Tensor], out: &Tensor, g: &Tensor, wanted: &[bool]) -> Vec<Option<Tensor>> {
    let one = |t: Tensor| vec![Some(t)];
    match kind {
        OpKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ga = wanted[0].then(|| {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g.data(), (n as isize, 1), b.data(), (1, n as isize), &mut ga);
                Tensor::from_parts(vec![m, k], ga)
            });
            let gb = wanted[1].then(|| {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, a.data(), (1, k as isize), g.data(), (n as isize, 1), &mut gb);
                Tensor::from_parts(vec![k, n], gb)
            });
            vec![ga, gb]
        }
        OpKind::Add => vec![Some(g.clone()), Some(g.clone())],
        OpKind::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
        OpKind::Mul => vec![
            wanted[0].then(|| zip_map(g, inputs[1], |gv, y| gv * y)),
            wanted[1].then(|| zip_map(g, inputs[0], |gv, x| gv * x)),
        ],
        OpKind::ScalarMul(s) => one(g.map(|v| v * s)),
        OpKind::AddScalar(_) => one(g.clone()),
        OpKind::AddBias => {
            let c = inputs[1].len();
            let mut gb = vec![0.0; c];
            for row in g.data().chunks(c) {
                for (acc, v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            vec![Some(g.clone()), Some(Tensor::from_parts(vec![c], gb))]
        }
        OpKind::Reshape(_) => one(Tensor::from_parts(inputs[0].shape().to_vec(), g.data().to_vec())),
        OpKind::Concat(axis) => {
            let (outer, total, inner) = split_axis(g.shape(), *axis);
            let mut offset = 0;
            let mut grads = Vec::with_capacity(inputs.len());
            for (t, &w) in inputs.iter().zip(wanted) {
                let len = t.shape()[*axis];
                if w {
                    let mut part = Vec::with_capacity(t.len());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        part.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    grads.push(Some(Tensor::from_parts(t.shape().to_vec(), part)));
                } else {
                    grads.push(None);
                }
                offset += len;
            }
            grads
        }
        OpKind::Slice { axis, start, end } => {
            let x = inputs[0];
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let w = (end - start) * inner;
            let mut gx = vec![0.0; x.len()];
            for o in 0..outer {
                let dst = o * len * inner + start * inner;
                gx[dst..dst + w].copy_from_slice(&g.data()[o * w..(o + 1) * w]);
            }
            one(Tensor::from_parts(x.shape().to_vec(), gx))
        }
        OpKind::Transpose => {
            let back = forward(&OpKind::Transpose, &[g]).expect("transpose of a transposed gradient");
            one(back)
        }
        OpKind::Sum => {
            let gv = g.data()[0];
            one(Tensor::full(inputs[0].shape(), gv))
        }
        OpKind::Mean => {
            let x = inputs[0];
            one(Tensor::full(x.shape(), g.data()[0] / x.len() as f64))
        }
        OpKind::SumAxis(axis) | OpKind::L2Norm(axis) => {
            let x = inputs[0];
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let norm = matches!(kind, OpKind::L2Norm(_));
            let mut gx = vec![0.0; x.len()];
            for o in 0..outer {
                for a in 0..len {
                    let base = (o * len + a) * inner;
                    for i in 0..inner {
                        let gi = g.data()[o * inner + i];
                        gx[base + i] = if norm {
                            let r = out.data()[o * inner + i] - math::NORM_EPS;
                            if r > 0.0 {
                                gi * x.data()[base + i] / r
                            } else {
                                0.0
                            }
                        } else {
                            gi
                        };
                    }
                }
            }
            one(Tensor::from_parts(x.shape().to_vec(), gx))
        }
        OpKind::Exp => one(zip_map(g, out, |gv, y| gv * y)),
        OpKind::Log => one(zip_map(
            g,
            inputs[0],
            |gv, x| {
                if x > math::LOG_FLOOR {
                    gv / x
                } else {
                    0.0
                }
            },
        )),
        OpKind::Softplus => one(zip_map(g, inputs[0], |gv, x| gv * math::sigmoid(x))),
        OpKind::Sigmoid => one(zip_map(g, out, |gv, y| gv * y * (1.0 - y))),
        OpKind::Silu => one(zip_map(g, inputs[0], |gv, x| gv * math::silu_grad(x))),
        OpKind::Relu => one(zip_map(g, inputs[0], |gv, x| if x > 0.0 { gv } else { 0.0 })),
        OpKind::Square => one(zip_map(g, inputs[0], |gv, x| 2.0 * x * gv)),
        OpKind::ClampMin(floor) => one(zip_map(g, inputs[0], |gv, x| if x > *floor { gv } else { 0.0 })),
        OpKind::CosineSimilarityMatrix => cosine_backward(inputs[0], inputs[1], g, wanted),
        OpKind::Conv1dDepthwise => conv1d_backward(inputs, g),
        OpKind::SelectiveScan => scan_backward(inputs, g),
    }
}

/// Gradient of `x / (|x| + eps)` row-wise, given the gradient `gn` with
/// respect to the normalized rows.
fn normalize_rows_backward(x: &Tensor, gn: &[f64]) -> Tensor {
    let d = x.shape()[1];
    let mut gx = vec![0.0; x.len()];
    for ((row, grow), out) in x.data().chunks(d).zip(gn.chunks(d)).zip(gx.chunks_mut(d)) {
        let r = crate::tensor::l2_norm(row);
        let re = r + math::NORM_EPS;
        let dot: f64 = row.iter().zip(grow).map(|(a, b)| a * b).sum();
        for ((o, &xv), &gv) in out.iter_mut().zip(row).zip(grow) {
            *o = gv / re;
            if r > 0.0 {
                *o -= xv * dot / (r * re * re);
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), gx)
}

fn cosine_backward(a: &Tensor, b: &Tensor, g: &Tensor, wanted: &[bool]) -> Vec<Option<Tensor>> {
    let (n, d, m) = (a.shape()[0], a.shape()[1], b.shape()[0]);
    let an = a.unit_rows();
    let bn = b.unit_rows();
    let ga = wanted[0].then(|| {
        // d(an) = G * bn
        let mut gan = vec![0.0; n * d];
        gemm(n, m, d, g.data(), (m as isize, 1), bn.data(), (d as isize, 1), &mut gan);
        normalize_rows_backward(a, &gan)
    });
    let gb = wanted[1].then(|| {
        // d(bn) = G^T * an
        let mut gbn = vec![0.0; m * d];
        gemm(m, n, d, g.data(), (1, m as isize), an.data(), (d as isize, 1), &mut gbn);
        normalize_rows_backward(b, &gbn)
    });
    vec![ga, gb]
}

fn conv1d_backward(inputs: &[&Tensor], g: &Tensor) -> Vec<Option<Tensor>> {
    let (x, w) = (inputs[0], inputs[1]);
    let (n, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = w.shape()[1];
    let (src, wd, gd) = (x.data(), w.data(), g.data());
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * l;
            for t in 0..l {
                let gt = gd[base + t];
                gb[ci] += gt;
                for j in 0..k.min(t + 1) {
                    gw[ci * k + j] += gt * src[base + t - j];
                    gx[base + t - j] += gt * wd[ci * k + j];
                }
            }
        }
    }
    vec![
        Some(Tensor::from_parts(x.shape().to_vec(), gx)),
        Some(Tensor::from_parts(w.shape().to_vec(), gw)),
        Some(Tensor::from_parts(vec![c], gb)),
    ]
}

/// Reverse sweep of the selective scan. States are recomputed per
/// (sample, channel) so memory stays at `length x state` per sweep.
fn scan_backward(inputs: &[&Tensor], g: &Tensor) -> Vec<Option<Tensor>> {
    let s = ScanShape::check(inputs).expect("shapes validated in forward");
    let (x, delta, a, b, c, d) = (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4], inputs[5]);
    let per_step = s.c * s.s;
    let mut gx = vec![0.0; x.len()];
    let mut gdelta = vec![0.0; x.len()];
    let mut ga = vec![0.0; a.len()];
    let mut gbv = vec![0.0; b.len()];
    let mut gcv = vec![0.0; c.len()];
    let mut gd = vec![0.0; d.len()];
    // states[t] holds h_t for every channel; h_{-1} = 0
    let mut states = vec![0.0; s.l * per_step];
    let mut decays = vec![0.0; s.l * per_step];
    let mut scratch = vec![0.0; s.c];
    let zero = vec![0.0; per_step];
    let mut h = vec![0.0; per_step];
    let mut gh = vec![0.0; per_step];
    for n in 0..s.n {
        h.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..s.l {
            let r = t * per_step..(t + 1) * per_step;
            s.step(inputs, n, t, &mut h, &mut decays[r.clone()], &mut scratch);
            states[r].copy_from_slice(&h);
        }
        gh.iter_mut().for_each(|v| *v = 0.0);
        for t in (0..s.l).rev() {
            let xo = (n * s.l + t) * s.c;
            let so = (n * s.l + t) * s.s;
            let ht = &states[t * per_step..(t + 1) * per_step];
            let hprev = if t == 0 {
                &zero[..]
            } else {
                &states[(t - 1) * per_step..t * per_step]
            };
            let ab = &decays[t * per_step..(t + 1) * per_step];
            let bj = &b.data()[so..so + s.s];
            let cj = &c.data()[so..so + s.s];
            for ch in 0..s.c {
                let gy = g.data()[xo + ch];
                let xv = x.data()[xo + ch];
                let dt = delta.data()[xo + ch];
                gd[ch] += gy * xv;
                let mut gxv = gy * d.data()[ch];
                let mut gdt = 0.0;
                let base = ch * s.s;
                for j in 0..s.s {
                    let k = base + j;
                    let aj = a.data()[k];
                    gcv[so + j] += gy * ht[k];
                    gh[k] += gy * cj[j];
                    let g_abar = gh[k] * hprev[k];
                    gdt += g_abar * ab[k] * aj + gh[k] * bj[j] * xv;
                    ga[k] += g_abar * ab[k] * dt;
                    gbv[so + j] += gh[k] * dt * xv;
                    gxv += gh[k] * dt * bj[j];
                    gh[k] *= ab[k];
                }
                gx[xo + ch] += gxv;
                gdelta[xo + ch] += gdt;
            }
        }
    }
    vec![
        Some(Tensor::from_parts(x.shape().to_vec(), gx)),
        Some(Tensor::from_parts(delta.shape().to_vec(), gdelta)),
        Some(Tensor::from_parts(a.shape().to_vec(), ga)),
        Some(Tensor::from_parts(b.shape().to_vec(), gbv)),
        Some(Tensor::from_parts(c.shape().to_vec(), gcv)),
        Some(Tensor::from_parts(d.shape().to_vec(), gd)),
    ]
}
