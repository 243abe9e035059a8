use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvDims};
use crate::tensor::Tensor;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f32),
    AddScalar(f32),
    Exp,
    Log,
    Sqrt,
    Abs,
    Relu,
    Sigmoid,
    BceLogits(Arc<[f32]>),
    MatMul,
    Transpose,
    Reshape(Vec<usize>),
    BroadcastTo(Vec<usize>),
    SumTo(Vec<usize>),
    Conv2d { pad: usize },
    ConvInputGrad { pad: usize, x_shape: Vec<usize> },
    ConvWeightGrad { pad: usize, w_shape: Vec<usize> },
    AvgPool(usize),
    AvgPoolAdjoint { k: usize, x_shape: Vec<usize> },
    Gather { indices: Arc<[usize]>, shape: Vec<usize> },
    Scatter { indices: Arc<[usize]>, shape: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Abs => "abs",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::BceLogits(_) => "bce_with_logits",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape(_) => "reshape",
            Op::BroadcastTo(_) => "broadcast_to",
            Op::SumTo(_) => "sum_to",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvInputGrad { .. } => "conv2d_input_grad",
            Op::ConvWeightGrad { .. } => "conv2d_weight_grad",
            Op::AvgPool(_) => "avg_pool2d",
            Op::AvgPoolAdjoint { .. } => "avg_pool2d_adjoint",
            Op::Gather { .. } => "gather",
            Op::Scatter { .. } => "scatter",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<usize>,
}

/// Wengert list of primitive applications.
///
/// Nodes are appended in evaluation order, so inputs always precede outputs.
/// In higher-order mode the backward pass of [`Tape::grad`] is itself
/// recorded, making gradients differentiable; otherwise gradient nodes are
/// stored as detached constants.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    higher_order: bool,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn elementwise(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(TensorError::InvalidArgument {
            op,
            reason: format!("expected rank {rank}, got shape {:?}", t.shape()),
        });
    }
    Ok(())
}

fn pool_check(op: &'static str, x: &Tensor, k: usize) -> Result<()> {
    expect_rank(op, x, 4)?;
    let s = x.shape();
    if k == 0 || !s[2].is_multiple_of(k) || !s[3].is_multiple_of(k) {
        return Err(TensorError::InvalidArgument {
            op,
            reason: format!("window {k} does not tile {:?}", s),
        });
    }
    Ok(())
}

fn stable_sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Forward evaluation of one primitive.
fn eval(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let unary = |f: fn(f32) -> f32| Ok(inputs[0].map(f));
    match op {
        Op::Leaf => unreachable!("leaves are never evaluated"),
        Op::Add => elementwise("add", inputs[0], inputs[1], |a, b| a + b),
        Op::Sub => elementwise("sub", inputs[0], inputs[1], |a, b| a - b),
        Op::Mul => elementwise("mul", inputs[0], inputs[1], |a, b| a * b),
        Op::Div => elementwise("div", inputs[0], inputs[1], |a, b| a / b),
        Op::Neg => unary(|v| -v),
        Op::Scale(c) => {
            let c = *c;
            Ok(inputs[0].map(|v| v * c))
        }
        Op::AddScalar(c) => {
            let c = *c;
            Ok(inputs[0].map(|v| v + c))
        }
        Op::Exp => unary(f32::exp),
        Op::Log => unary(f32::ln),
        Op::Sqrt => unary(f32::sqrt),
        Op::Abs => unary(f32::abs),
        Op::Relu => unary(|v| if v > 0.0 { v } else { 0.0 }),
        Op::Sigmoid => unary(stable_sigmoid),
        Op::BceLogits(labels) => {
            let z = inputs[0];
            if z.numel() != labels.len() {
                return Err(TensorError::InvalidArgument {
                    op: "bce_with_logits",
                    reason: format!("{} logits vs {} labels", z.numel(), labels.len()),
                });
            }
            let data = z
                .data()
                .iter()
                .zip(labels.iter())
                .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
                .collect();
            Ok(Tensor::from_parts(z.shape().to_vec(), data))
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            expect_rank("matmul", a, 2)?;
            expect_rank("matmul", b, 2)?;
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if b.shape()[0] != k {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            Ok(Tensor::from_parts(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n)))
        }
        Op::Transpose => {
            let a = inputs[0];
            expect_rank("transpose", a, 2)?;
            let (m, n) = (a.shape()[0], a.shape()[1]);
            Ok(Tensor::from_parts(vec![n, m], kernels::transpose(a.data(), m, n)))
        }
        Op::Reshape(shape) => inputs[0].clone().reshape(shape),
        Op::BroadcastTo(shape) => {
            let a = inputs[0];
            if !kernels::can_broadcast(a.shape(), shape) {
                return Err(TensorError::ShapeMismatch {
                    op: "broadcast_to",
                    lhs: a.shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
            Ok(Tensor::from_parts(shape.clone(), kernels::broadcast_to(a.data(), a.shape(), shape)))
        }
        Op::SumTo(shape) => {
            let a = inputs[0];
            if !kernels::can_broadcast(shape, a.shape()) {
                return Err(TensorError::ShapeMismatch {
                    op: "sum_to",
                    lhs: a.shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
            Ok(Tensor::from_parts(shape.clone(), kernels::sum_to(a.data(), a.shape(), shape)))
        }
        Op::Conv2d { pad } => {
            let (x, w) = (inputs[0], inputs[1]);
            let d = ConvDims::new(x.shape(), w.shape(), *pad)?;
            Ok(Tensor::from_parts(d.y_shape(), kernels::conv2d(&d, x.data(), w.data())))
        }
        Op::ConvInputGrad { pad, x_shape } => {
            let (dy, w) = (inputs[0], inputs[1]);
            let d = ConvDims::new(x_shape, w.shape(), *pad)?;
            if dy.shape() != d.y_shape().as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d_input_grad",
                    lhs: dy.shape().to_vec(),
                    rhs: d.y_shape(),
                });
            }
            Ok(Tensor::from_parts(d.x_shape(), kernels::conv2d_input_grad(&d, dy.data(), w.data())))
        }
        Op::ConvWeightGrad { pad, w_shape } => {
            let (x, dy) = (inputs[0], inputs[1]);
            let d = ConvDims::new(x.shape(), w_shape, *pad)?;
            if dy.shape() != d.y_shape().as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d_weight_grad",
                    lhs: dy.shape().to_vec(),
                    rhs: d.y_shape(),
                });
            }
            Ok(Tensor::from_parts(d.w_shape(), kernels::conv2d_weight_grad(&d, x.data(), dy.data())))
        }
        Op::AvgPool(k) => {
            let x = inputs[0];
            pool_check("avg_pool2d", x, *k)?;
            let s = x.shape();
            Ok(Tensor::from_parts(
                vec![s[0], s[1], s[2] / k, s[3] / k],
                kernels::avg_pool(x.data(), s, *k),
            ))
        }
        Op::AvgPoolAdjoint { k, x_shape } => {
            let dy = inputs[0];
            let expect = [x_shape[0], x_shape[1], x_shape[2] / k, x_shape[3] / k];
            if dy.shape() != expect {
                return Err(TensorError::ShapeMismatch {
                    op: "avg_pool2d_adjoint",
                    lhs: dy.shape().to_vec(),
                    rhs: expect.to_vec(),
                });
            }
            Ok(Tensor::from_parts(x_shape.clone(), kernels::avg_pool_adjoint(dy.data(), x_shape, *k)))
        }
        Op::Gather { indices, shape } => {
            let x = inputs[0].data();
            Ok(Tensor::from_parts(shape.clone(), indices.iter().map(|&i| x[i]).collect()))
        }
        Op::Scatter { indices, shape } => {
            let src = inputs[0].data();
            let mut out = vec![0f32; shape.iter().product()];
            for (&i, &v) in indices.iter().zip(src) {
                out[i] += v;
            }
            Ok(Tensor::from_parts(shape.clone(), out))
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            higher_order: false,
            recording: true,
        }
    }

    /// Tape whose gradients are themselves differentiable.
    pub fn higher_order() -> Self {
        Self {
            higher_order: true,
            ..Self::new()
        }
    }

    pub fn is_higher_order(&self) -> bool {
        self.higher_order
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::ForeignNode(v.index));
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.check(v)?].value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.value(v)?.shape())
    }

    /// Input or parameter. Leaves may appear in the `wrt` set of [`Tape::grad`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, Vec::new())
    }

    /// Alias of [`Tape::leaf`] for values that are never differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: Vec<usize>) -> Var {
        let (op, inputs) = if self.recording { (op, inputs) } else { (Op::Leaf, Vec::new()) };
        self.nodes.push(Node { value, op, inputs });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let idx = inputs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let values: Vec<&Tensor> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let out = eval(&op, &values)?;
        if !out.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        Ok(self.push(out, op, idx))
    }

    fn binary(&mut self, op: Op, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a)?.to_vec(), self.shape(b)?.to_vec());
        if sa == sb {
            return self.apply(op, &[a, b]);
        }
        let common = kernels::broadcast_shape(&sa, &sb).ok_or_else(|| TensorError::ShapeMismatch {
            op: op.name(),
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let a = if sa == common { a } else { self.broadcast_to(a, &common)? };
        let b = if sb == common { b } else { self.broadcast_to(b, &common)? };
        self.apply(op, &[a, b])
    }

    /// Elementwise sum with numpy broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Div, a, b)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Neg, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        self.apply(Op::Scale(c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Result<Var> {
        self.apply(Op::AddScalar(c), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Log, &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sqrt, &[a])
    }

    /// Absolute value; the derivative at 0 is taken as 0.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Abs, &[a])
    }

    /// Rectifier; the derivative at 0 is taken as 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Relu, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[a])
    }

    /// Elementwise binary cross-entropy of `sigmoid(logits)` against fixed
    /// labels, evaluated as `max(z,0) - z*y + ln(1 + e^{-|z|})`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f32]) -> Result<Var> {
        self.apply(Op::BceLogits(Arc::from(labels)), &[logits])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Transpose, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(a)? == shape {
            return Ok(a);
        }
        self.apply(Op::Reshape(shape.to_vec()), &[a])
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::BroadcastTo(shape.to_vec()), &[a])
    }

    /// Sum over the axes along which `shape` was broadcast to `a`'s shape.
    pub fn sum_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::SumTo(shape.to_vec()), &[a])
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a)?.numel();
        let flat = self.reshape(a, &[n])?;
        self.sum_to(flat, &[1])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a)?.numel();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f32)
    }

    /// Stride-1 cross-correlation of `x: [N,C,H,W]` with `w: [O,C,K,K]` and
    /// symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        self.apply(Op::Conv2d { pad }, &[x, w])
    }

    pub fn conv2d_input_grad(&mut self, dy: Var, w: Var, pad: usize, x_shape: &[usize]) -> Result<Var> {
        self.apply(
            Op::ConvInputGrad {
                pad,
                x_shape: x_shape.to_vec(),
            },
            &[dy, w],
        )
    }

    pub fn conv2d_weight_grad(&mut self, x: Var, dy: Var, pad: usize, w_shape: &[usize]) -> Result<Var> {
        self.apply(
            Op::ConvWeightGrad {
                pad,
                w_shape: w_shape.to_vec(),
            },
            &[x, dy],
        )
    }

    /// Non-overlapping `k x k` average pooling over the last two axes.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        self.apply(Op::AvgPool(k), &[x])
    }

    /// Non-overlapping `k x k` max pooling; ties resolve to the lowest flat index.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x)?;
        pool_check("max_pool2d", xv, k)?;
        let s = xv.shape().to_vec();
        let indices: Arc<[usize]> = kernels::max_pool_indices(xv.data(), &s, k).into();
        let shape = vec![s[0], s[1], s[2] / k, s[3] / k];
        self.apply(Op::Gather { indices, shape }, &[x])
    }

    fn avg_pool_adjoint(&mut self, dy: Var, k: usize, x_shape: &[usize]) -> Result<Var> {
        self.apply(
            Op::AvgPoolAdjoint {
                k,
                x_shape: x_shape.to_vec(),
            },
            &[dy],
        )
    }

    /// Vector-Jacobian product of node `i` for the inputs flagged in `need`.
    fn vjp(&mut self, i: usize, dy: Var, need: &[bool]) -> Result<Vec<Option<Var>>> {
        let node = &self.nodes[i];
        let op = node.op.clone();
        let ins: Vec<Var> = node.inputs.iter().map(|&index| Var { tape: self.id, index }).collect();
        let in_shape = |t: &Self, k: usize| t.nodes[ins[k].index].value.shape().to_vec();
        let y = Var { tape: self.id, index: i };
        let mut out = vec![None; ins.len()];
        match op {
            Op::Leaf => {}
            Op::Add => {
                out[0] = Some(dy);
                out[1] = Some(dy);
            }
            Op::Sub => {
                out[0] = Some(dy);
                if need[1] {
                    out[1] = Some(self.neg(dy)?);
                }
            }
            Op::Mul => {
                if need[0] {
                    out[0] = Some(self.mul(dy, ins[1])?);
                }
                if need[1] {
                    out[1] = Some(self.mul(dy, ins[0])?);
                }
            }
            Op::Div => {
                if need[0] {
                    out[0] = Some(self.div(dy, ins[1])?);
                }
                if need[1] {
                    let q = self.div(y, ins[1])?;
                    let t = self.mul(dy, q)?;
                    out[1] = Some(self.neg(t)?);
                }
            }
            Op::Neg => out[0] = Some(self.neg(dy)?),
            Op::Scale(c) => out[0] = Some(self.scale(dy, c)?),
            Op::AddScalar(_) => out[0] = Some(dy),
            Op::Exp => out[0] = Some(self.mul(dy, y)?),
            Op::Log => out[0] = Some(self.div(dy, ins[0])?),
            Op::Sqrt => {
                let half = self.scale(dy, 0.5)?;
                out[0] = Some(self.div(half, y)?);
            }
            Op::Abs => {
                let sign = self.nodes[ins[0].index].value.map(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                let s = self.constant(sign);
                out[0] = Some(self.mul(dy, s)?);
            }
            Op::Relu => {
                let mask = self.nodes[ins[0].index].value.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let m = self.constant(mask);
                out[0] = Some(self.mul(dy, m)?);
            }
            Op::Sigmoid => {
                let ny = self.neg(y)?;
                let one_minus = self.add_scalar(ny, 1.0)?;
                let slope = self.mul(y, one_minus)?;
                out[0] = Some(self.mul(dy, slope)?);
            }
            Op::BceLogits(labels) => {
                let shape = in_shape(self, 0);
                let s = self.sigmoid(ins[0])?;
                let l = self.constant(Tensor::new(shape, labels.to_vec())?);
                let resid = self.sub(s, l)?;
                out[0] = Some(self.mul(dy, resid)?);
            }
            Op::MatMul => {
                if need[0] {
                    let bt = self.transpose(ins[1])?;
                    out[0] = Some(self.matmul(dy, bt)?);
                }
                if need[1] {
                    let at = self.transpose(ins[0])?;
                    out[1] = Some(self.matmul(at, dy)?);
                }
            }
            Op::Transpose => out[0] = Some(self.transpose(dy)?),
            Op::Reshape(_) => {
                let s = in_shape(self, 0);
                out[0] = Some(self.reshape(dy, &s)?);
            }
            Op::BroadcastTo(_) => {
                let s = in_shape(self, 0);
                out[0] = Some(self.sum_to(dy, &s)?);
            }
            Op::SumTo(_) => {
                let s = in_shape(self, 0);
                out[0] = Some(self.broadcast_to(dy, &s)?);
            }
            Op::Conv2d { pad } => {
                if need[0] {
                    let s = in_shape(self, 0);
                    out[0] = Some(self.conv2d_input_grad(dy, ins[1], pad, &s)?);
                }
                if need[1] {
                    let s = in_shape(self, 1);
                    out[1] = Some(self.conv2d_weight_grad(ins[0], dy, pad, &s)?);
                }
            }
            Op::ConvInputGrad { pad, .. } => {
                // inputs (dy_in, w); output shaped like the conv input
                if need[0] {
                    out[0] = Some(self.conv2d(dy, ins[1], pad)?);
                }
                if need[1] {
                    let s = in_shape(self, 1);
                    out[1] = Some(self.conv2d_weight_grad(dy, ins[0], pad, &s)?);
                }
            }
            Op::ConvWeightGrad { pad, .. } => {
                // inputs (x, dy_in); output shaped like the kernel
                if need[0] {
                    let s = in_shape(self, 0);
                    out[0] = Some(self.conv2d_input_grad(ins[1], dy, pad, &s)?);
                }
                if need[1] {
                    out[1] = Some(self.conv2d(ins[0], dy, pad)?);
                }
            }
            Op::AvgPool(k) => {
                let s = in_shape(self, 0);
                out[0] = Some(self.avg_pool_adjoint(dy, k, &s)?);
            }
            Op::AvgPoolAdjoint { k, .. } => out[0] = Some(self.avg_pool2d(dy, k)?),
            Op::Gather { indices, .. } => {
                let shape = in_shape(self, 0);
                out[0] = Some(self.apply(Op::Scatter { indices, shape }, &[dy])?);
            }
            Op::Scatter { indices, .. } => {
                let shape = in_shape(self, 0);
                out[0] = Some(self.apply(Op::Gather { indices, shape }, &[dy])?);
            }
        }
        Ok(out)
    }

    /// Reverse-mode gradients of a single-element node with respect to `wrt`.
    ///
    /// Gradient values are returned as nodes on this tape. On a higher-order
    /// tape they are differentiable expressions of the forward nodes. Nodes in
    /// `wrt` that do not influence `scalar` receive a zero tensor.
    pub fn grad(&mut self, scalar: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let root = self.check(scalar)?;
        let root_shape = self.nodes[root].value.shape().to_vec();
        if self.nodes[root].value.numel() != 1 {
            return Err(TensorError::NonScalar(root_shape));
        }
        let targets = wrt.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;

        let mut needs = vec![false; root + 1];
        for &t in &targets {
            if t <= root {
                needs[t] = true;
            }
        }
        let start = targets.iter().copied().filter(|&t| t <= root).min().unwrap_or(root + 1);
        for i in start..=root {
            if !needs[i] {
                needs[i] = self.nodes[i].inputs.iter().any(|&j| needs[j]);
            }
        }

        let prev = self.recording;
        self.recording = self.higher_order;
        let result = self.backward(root, &root_shape, &needs, start, &targets);
        self.recording = prev;
        result
    }

    /// Like [`grad`](Self::grad) but the backward pass is never recorded,
    /// even on a higher-order tape. Use for the outermost derivative.
    pub fn grad_detached(&mut self, scalar: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let prev = self.higher_order;
        self.higher_order = false;
        let result = self.grad(scalar, wrt);
        self.higher_order = prev;
        result
    }

    fn backward(&mut self, root: usize, root_shape: &[usize], needs: &[bool], start: usize, targets: &[usize]) -> Result<Vec<Var>> {
        let mut adjoint: Vec<Option<Var>> = vec![None; root + 1];
        if needs[root] {
            adjoint[root] = Some(self.constant(Tensor::ones(root_shape)?));
        }
        for i in (start..=root).rev() {
            let Some(dy) = adjoint[i] else { continue };
            if self.nodes[i].inputs.is_empty() {
                continue;
            }
            let inputs = self.nodes[i].inputs.clone();
            let need: Vec<bool> = inputs.iter().map(|&j| needs[j]).collect();
            if !need.iter().any(|&n| n) {
                continue;
            }
            let contribs = self.vjp(i, dy, &need)?;
            for ((&j, c), n) in inputs.iter().zip(contribs).zip(need) {
                let (Some(c), true) = (c, n) else { continue };
                adjoint[j] = Some(match adjoint[j] {
                    Some(acc) => self.add(acc, c)?,
                    None => c,
                });
            }
        }
        targets
            .iter()
            .map(|&t| match adjoint.get(t).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let shape = self.nodes[t].value.shape().to_vec();
                    Ok(self.constant(Tensor::zeros(&shape)?))
                }
            })
            .collect()
    }

    /// Recompute every recorded primitive from its inputs and report whether
    /// all outputs match the stored values bitwise.
    pub fn replay(&self) -> Result<bool> {
        for node in &self.nodes {
            if node.inputs.is_empty() {
                continue;
            }
            let values: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let again = eval(&node.op, &values)?;
            let same = again.shape() == node.value.shape() && again.data().iter().zip(node.value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_grad(f: impl Fn(&mut Tape, Var) -> Result<Var>, x: f32) -> f32 {
        let mut t = Tape::new();
        let v = t.leaf(Tensor::scalar(x));
        let y = f(&mut t, v).unwrap();
        let g = t.grad(y, &[v]).unwrap();
        t.value(g[0]).unwrap().item().unwrap()
    }

    #[test]
    fn square_derivative() {
        assert_eq!(scalar_grad(|t, x| t.mul(x, x), 3.0), 6.0);
    }

    #[test]
    fn sum_gives_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap());
        let s = t.sum(x).unwrap();
        let g = t.grad(s, &[x]).unwrap();
        assert_eq!(t.value(g[0]).unwrap(), &Tensor::ones(&[2, 3]).unwrap());
    }

    #[test]
    fn second_derivative_of_cube() {
        let mut t = Tape::higher_order();
        let x = t.leaf(Tensor::scalar(2.0));
        let x2 = t.mul(x, x).unwrap();
        let x3 = t.mul(x2, x).unwrap();
        let g = t.grad(x3, &[x]).unwrap()[0];
        assert_eq!(t.value(g).unwrap().item().unwrap(), 12.0);
        let h = t.grad(g, &[x]).unwrap()[0];
        assert_eq!(t.value(h).unwrap().item().unwrap(), 12.0);

        let before = t.len();
        let h = t.grad_detached(g, &[x]).unwrap()[0];
        assert_eq!(t.value(h).unwrap().item().unwrap(), 12.0);
        // detached backward leaves no path back to x
        let k = t.grad(h, &[x]).unwrap()[0];
        assert_eq!(t.value(k).unwrap().item().unwrap(), 0.0);
        assert!(t.is_higher_order() && t.len() > before);
    }

    #[test]
    fn first_order_tape_detaches_gradients() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0));
        let x2 = t.mul(x, x).unwrap();
        let g = t.grad(x2, &[x]).unwrap()[0];
        let h = t.grad(g, &[x]).unwrap()[0];
        assert_eq!(t.value(h).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn unrelated_wrt_gets_zeros() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1.0));
        let y = t.leaf(Tensor::from_slice(&[1.0, 2.0]).unwrap());
        let s = t.scale(x, 2.0).unwrap();
        let g = t.grad(s, &[x, y]).unwrap();
        assert_eq!(t.value(g[1]).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn errors_surface() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_slice(&[1.0, 2.0]).unwrap());
        assert!(matches!(t.grad(x, &[x]), Err(TensorError::NonScalar(_))));
        let z = t.leaf(Tensor::scalar(0.0));
        assert!(matches!(t.log(z), Err(TensorError::NonFinite { op: "log" })));
        let mut other = Tape::new();
        let w = other.leaf(Tensor::scalar(1.0));
        assert!(matches!(t.grad(z, &[w]), Err(TensorError::ForeignNode(_))));
        let m = t.leaf(Tensor::zeros(&[3]).unwrap());
        assert!(t.add(x, m).is_err());
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        assert_eq!(scalar_grad(|t, x| t.relu(x), 0.0), 0.0);
        assert_eq!(scalar_grad(|t, x| t.abs(x), 0.0), 0.0);
    }

    #[test]
    fn bce_is_stable() {
        let mut t = Tape::new();
        let z = t.leaf(Tensor::scalar(30.0));
        let l = t.bce_with_logits(z, &[1.0]).unwrap();
        let v = t.value(l).unwrap().item().unwrap();
        assert!(v.is_finite() && v > 0.0 && v < 1e-12);
    }

    #[test]
    fn broadcasting_add_gradient_sums() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]).unwrap());
        let b = t.leaf(Tensor::zeros(&[3]).unwrap());
        let c = t.add(a, b).unwrap();
        let s = t.sum(c).unwrap();
        let g = t.grad(s, &[b]).unwrap();
        assert_eq!(t.value(g[0]).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 1, 2, 2], vec![0.1, 0.9, 0.9, 0.3]).unwrap());
        let p = t.max_pool2d(x, 2).unwrap();
        assert_eq!(t.value(p).unwrap().data(), &[0.9]);
        let s = t.sum(p).unwrap();
        let g = t.grad(s, &[x]).unwrap();
        assert_eq!(t.value(g[0]).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn replay_reproduces() {
        let mut t = Tape::higher_order();
        let x = t.leaf(Tensor::new(vec![1, 1, 4, 4], (0..16).map(|v| v as f32 * 0.1).collect()).unwrap());
        let w = t.leaf(Tensor::new(vec![2, 1, 3, 3], (0..18).map(|v| (v as f32 * 0.37).sin()).collect()).unwrap());
        let y = t.conv2d(x, w, 1).unwrap();
        let y = t.sigmoid(y).unwrap();
        let y = t.avg_pool2d(y, 2).unwrap();
        let s = t.mean(y).unwrap();
        let g = t.grad(s, &[w]).unwrap()[0];
        let n = t.mul(g, g).unwrap();
        let n = t.sum(n).unwrap();
        t.grad(n, &[x]).unwrap();
        assert!(t.replay().unwrap());
    }
}
