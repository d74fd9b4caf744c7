//! Taped reverse-mode automatic differentiation.
//!
//! A [`Graph`] records one forward pass as an append-only list of nodes, so
//! node order is already topological. [`Var`] is a lightweight handle
//! (graph reference + node id); operations on vars compute values eagerly
//! with the kernels in [`super::kernels`] and push a node describing how to
//! back-propagate. [`Var::backward`] walks the tape in reverse, accumulating
//! gradients additively into every node that requires them, which handles
//! multiple uses of the same node for free.
//!
//! Graphs are confined to one thread and intended to be short-lived: build,
//! run backward once, read leaf gradients, drop.

use std::cell::RefCell;

use super::kernels as k;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Min,
    Max,
    AddScalar,
    MulScalar(f64),
    AddBias,
    MatMul,
    Conv2d { stride: usize, pad: usize },
    ConvTranspose2d { stride: usize, pad: usize },
    DepthwiseConv2d,
    ReflectPad2d { pad: usize },
    MaxPool2d { size: usize },
    InstanceNorm2d { eps: f64 },
    Relu,
    Tanh,
    Exp,
    Log,
    Neg,
    Clamp { lo: f64, hi: f64 },
    SumAll,
    MeanAll,
    SumAxis { axis: usize },
    MeanAxis { axis: usize },
    SoftmaxLast,
    CrossEntropyMean { labels: Vec<usize> },
    Reshape,
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Per-forward-pass compute tape.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to one node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, op: Op, inputs: Vec<usize>, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
            grad: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Lift a tensor as a leaf; gradient participation follows the tensor's
    /// `requires_grad` flag.
    pub fn leaf(&self, t: &Tensor) -> Result<Var<'_>> {
        if !t.all_finite() {
            return Err(Error::NonFinite("leaf"));
        }
        let rg = t.requires_grad();
        Ok(self.push(Op::Leaf, vec![], t.clone(), rg))
    }

    /// Lift a tensor as a trainable leaf (gradient accumulated).
    pub fn param(&self, t: &Tensor) -> Result<Var<'_>> {
        if !t.all_finite() {
            return Err(Error::NonFinite("param"));
        }
        Ok(self.push(Op::Leaf, vec![], t.clone(), true))
    }

    /// Lift a tensor as a constant leaf (no gradient ever flows into it).
    pub fn constant(&self, t: &Tensor) -> Result<Var<'_>> {
        if !t.all_finite() {
            return Err(Error::NonFinite("constant"));
        }
        Ok(self.push(Op::Leaf, vec![], t.clone(), false))
    }
}

/// `rel = |a - b| accumulated; helper for shape equality errors.
fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl<'g> Var<'g> {
    pub fn value(&self) -> Tensor {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Gradient accumulated by the last [`Var::backward`] call, if any.
    pub fn grad(&self) -> Option<Tensor> {
        let nodes = self.graph.nodes.borrow();
        let node = &nodes[self.id];
        node.grad.as_ref().map(|g| {
            Tensor::from_vec(node.value.shape(), g.clone()).expect("grad buffer matches value shape")
        })
    }

    fn with<T>(&self, f: impl FnOnce(&Tensor) -> T) -> T {
        f(&self.graph.nodes.borrow()[self.id].value)
    }

    fn binary(&self, rhs: &Var<'g>, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var<'g>> {
        let nodes = self.graph.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
        same_shape(name, &a.value, &b.value)?;
        let value = a.value.zip_map(&b.value, name, f)?;
        let rg = a.requires_grad || b.requires_grad;
        drop(nodes);
        Ok(self.graph.push(op, vec![self.id, rhs.id], value, rg))
    }

    fn unary(&self, op: Op, value: Tensor) -> Var<'g> {
        let rg = self.requires_grad();
        self.graph.push(op, vec![self.id], value, rg)
    }

    pub fn add(&self, rhs: &Var<'g>) -> Result<Var<'g>> {
        self.binary(rhs, Op::Add, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Var<'g>) -> Result<Var<'g>> {
        self.binary(rhs, Op::Sub, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Var<'g>) -> Result<Var<'g>> {
        self.binary(rhs, Op::Mul, "mul", |a, b| a * b)
    }

    /// Elementwise minimum; at ties the gradient routes to `self`.
    pub fn min(&self, rhs: &Var<'g>) -> Result<Var<'g>> {
        self.binary(rhs, Op::Min, "min", |a, b| if a <= b { a } else { b })
    }

    /// Elementwise maximum; at ties the gradient routes to `self`.
    pub fn max(&self, rhs: &Var<'g>) -> Result<Var<'g>> {
        self.binary(rhs, Op::Max, "max", |a, b| if a >= b { a } else { b })
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g> {
        let value = self.with(|t| t.map(|v| v + c));
        self.unary(Op::AddScalar, value)
    }

    pub fn mul_scalar(&self, c: f64) -> Var<'g> {
        let value = self.with(|t| t.map(|v| v * c));
        self.unary(Op::MulScalar(c), value)
    }

    pub fn neg(&self) -> Var<'g> {
        let value = self.with(|t| t.map(|v| -v));
        self.unary(Op::Neg, value)
    }

    pub fn relu(&self) -> Var<'g> {
        let value = self.with(|t| t.map(|v| v.max(0.0)));
        self.unary(Op::Relu, value)
    }

    pub fn tanh(&self) -> Var<'g> {
        let value = self.with(|t| t.map(f64::tanh));
        self.unary(Op::Tanh, value)
    }

    pub fn exp(&self) -> Var<'g> {
        let value = self.with(|t| t.map(f64::exp));
        self.unary(Op::Exp, value)
    }

    /// Natural log; the input must be strictly positive.
    pub fn log(&self) -> Result<Var<'g>> {
        let ok = self.with(|t| t.data().iter().all(|&v| v > 0.0));
        if !ok {
            return Err(Error::NonFinite("log"));
        }
        let value = self.with(|t| t.map(f64::ln));
        Ok(self.unary(Op::Log, value))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'g> {
        let value = self.with(|t| t.map(|v| v.clamp(lo, hi)));
        self.unary(Op::Clamp { lo, hi }, value)
    }

    /// Add a rank-1 bias along the trailing axis: `(…, n) + (n)`.
    pub fn add_bias(&self, bias: &Var<'g>) -> Result<Var<'g>> {
        let nodes = self.graph.nodes.borrow();
        let (x, b) = (&nodes[self.id].value, &nodes[bias.id].value);
        let n = *x.shape().last().unwrap_or(&0);
        if b.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut data = x.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += b.data()[i % n];
        }
        let value = Tensor::from_vec(x.shape(), data)?;
        let rg = nodes[self.id].requires_grad || nodes[bias.id].requires_grad;
        drop(nodes);
        Ok(self.graph.push(Op::AddBias, vec![self.id, bias.id], value, rg))
    }

    /// `(m,k) @ (k,n)`.
    pub fn matmul(&self, rhs: &Var<'g>) -> Result<Var<'g>> {
        let nodes = self.graph.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, kk, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        k::matmul(a.data(), b.data(), &mut out, m, kk, n);
        let value = Tensor::from_vec(&[m, n], out)?;
        let rg = nodes[self.id].requires_grad || nodes[rhs.id].requires_grad;
        drop(nodes);
        Ok(self.graph.push(Op::MatMul, vec![self.id, rhs.id], value, rg))
    }

    /// 2d convolution. `self: (B,Cin,H,W)`, `weight: (Cout,Cin,KH,KW)`,
    /// optional `bias: (Cout)`.
    pub fn conv2d(&self, weight: &Var<'g>, bias: Option<&Var<'g>>, stride: usize, pad: usize) -> Result<Var<'g>> {
        let nodes = self.graph.nodes.borrow();
        let (x, w) = (&nodes[self.id].value, &nodes[weight.id].value);
        let d = conv_dims(x, w, stride, pad, false)?;
        if let Some(b) = bias {
            let bv = &nodes[b.id].value;
            if bv.shape() != [d.c_out] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![d.c_out],
                    rhs: bv.shape().to_vec(),
                });
            }
        }
        let (oh, ow) = (d.out_h(), d.out_w());
        let mut out = vec![0.0; d.batch * d.c_out * oh * ow];
        let bias_data = bias.map(|b| nodes[b.id].value.data().to_vec());
        k::conv2d_forward(x.data(), w.data(), bias_data.as_deref(), &mut out, &d);
        let value = Tensor::from_vec(&[d.batch, d.c_out, oh, ow], out)?;
        let mut inputs = vec![self.id, weight.id];
        let mut rg = nodes[self.id].requires_grad || nodes[weight.id].requires_grad;
        if let Some(b) = bias {
            inputs.push(b.id);
            rg |= nodes[b.id].requires_grad;
        }
        drop(nodes);
        Ok(self.graph.push(Op::Conv2d { stride, pad }, inputs, value, rg))
    }

    /// Transposed 2d convolution. `self: (B,Cin,H,W)`,
    /// `weight: (Cin,Cout,KH,KW)`, optional `bias: (Cout)`.
    pub fn conv_transpose2d(
        &self,
        weight: &Var<'g>,
        bias: Option<&Var<'g>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'g>> {
        let nodes = self.graph.nodes.borrow();
        let (x, w) = (&nodes[self.id].value, &nodes[weight.id].value);
        let d = conv_dims(x, w, stride, pad, true)?;
        if let Some(b) = bias {
            let bv = &nodes[b.id].value;
            if bv.shape() != [d.c_out] {
                return Err(Error::ShapeMismatch {
                    op: "conv_transpose2d bias",
                    lhs: vec![d.c_out],
                    rhs: bv.shape().to_vec(),
                });
            }
        }
        let oh = k::conv_transpose_out_len(d.h, d.kh, stride, pad);
        let ow = k::conv_transpose_out_len(d.w, d.kw, stride, pad);
        let mut out = vec![0.0; d.batch * d.c_out * oh * ow];
        let bias_data = bias.map(|b| nodes[b.id].value.data().to_vec());
        k::conv_transpose2d_forward(x.data(), w.data(), bias_data.as_deref(), &mut out, &d);
        let value = Tensor::from_vec(&[d.batch, d.c_out, oh, ow], out)?;
        let mut inputs = vec![self.id, weight.id];
        let mut rg = nodes[self.id].requires_grad || nodes[weight.id].requires_grad;
        if let Some(b) = bias {
            inputs.push(b.id);
            rg |= nodes[b.id].requires_grad;
        }
        drop(nodes);
        Ok(self
            .graph
            .push(Op::ConvTranspose2d { stride, pad }, inputs, value, rg))
    }

    /// Depthwise valid convolution with one `(KH,KW)` kernel shared by all
    /// channels, stride 1.
    pub fn depthwise_conv2d(&self, kernel: &Var<'g>) -> Result<Var<'g>> {
        let nodes = self.graph.nodes.borrow();
        let (x, kr) = (&nodes[self.id].value, &nodes[kernel.id].value);
        if x.shape().len() != 4 || kr.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "depthwise_conv2d",
                lhs: x.shape().to_vec(),
                rhs: kr.shape().to_vec(),
            });
        }
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (kh, kw) = (kr.shape()[0], kr.shape()[1]);
        if kh > h || kw > w {
            return Err(Error::ShapeMismatch {
                op: "depthwise_conv2d: image smaller than kernel",
                lhs: x.shape().to_vec(),
                rhs: kr.shape().to_vec(),
            });
        }
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let mut out = vec![0.0; b * c * oh * ow];
        k::depthwise_conv2d_forward(x.data(), kr.data(), &mut out, b * c, h, w, kh, kw);
        let value = Tensor::from_vec(&[b, c, oh, ow], out)?;
        let rg = nodes[self.id].requires_grad || nodes[kernel.id].requires_grad;
        drop(nodes);
        Ok(self
            .graph
            .push(Op::DepthwiseConv2d, vec![self.id, kernel.id], value, rg))
    }

    /// Reflect-pad the two trailing axes of a `(B,C,H,W)` tensor.
    pub fn reflect_pad2d(&self, pad: usize) -> Result<Var<'g>> {
        let x = self.value();
        if x.shape().len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "reflect_pad2d",
                lhs: x.shape().to_vec(),
                rhs: vec![4],
            });
        }
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if pad >= h || pad >= w {
            return Err(Error::InvalidArgument(format!(
                "reflect pad {pad} too large for {h}x{w} image"
            )));
        }
        let mut out = vec![0.0; b * c * (h + 2 * pad) * (w + 2 * pad)];
        k::reflect_pad2d_forward(x.data(), &mut out, b * c, h, w, pad);
        let value = Tensor::from_vec(&[b, c, h + 2 * pad, w + 2 * pad], out)?;
        Ok(self.unary(Op::ReflectPad2d { pad }, value))
    }

    /// Non-overlapping max pooling over `(B,C,H,W)`.
    pub fn maxpool2d(&self, size: usize) -> Result<Var<'g>> {
        let x = self.value();
        if x.shape().len() != 4 || size == 0 {
            return Err(Error::ShapeMismatch {
                op: "maxpool2d",
                lhs: x.shape().to_vec(),
                rhs: vec![4],
            });
        }
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oh, ow) = (h / size, w / size);
        let mut out = vec![0.0; b * c * oh * ow];
        k::maxpool2d_forward(x.data(), &mut out, b * c, h, w, size);
        let value = Tensor::from_vec(&[b, c, oh, ow], out)?;
        Ok(self.unary(Op::MaxPool2d { size }, value))
    }

    /// Instance normalization of a `(B,C,H,W)` tensor (per sample+channel).
    pub fn instance_norm2d(&self, eps: f64) -> Result<Var<'g>> {
        let x = self.value();
        if x.shape().len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "instance_norm2d",
                lhs: x.shape().to_vec(),
                rhs: vec![4],
            });
        }
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let mut out = vec![0.0; x.len()];
        k::instance_norm2d_forward(x.data(), &mut out, b * c, h * w, eps);
        let value = Tensor::from_vec(x.shape(), out)?;
        Ok(self.unary(Op::InstanceNorm2d { eps }, value))
    }

    pub fn sum_all(&self) -> Var<'g> {
        let v = self.with(|t| t.data().iter().sum::<f64>());
        self.unary(Op::SumAll, Tensor::scalar(v))
    }

    pub fn mean_all(&self) -> Var<'g> {
        let v = self.with(|t| t.data().iter().sum::<f64>() / t.len() as f64);
        self.unary(Op::MeanAll, Tensor::scalar(v))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var<'g>> {
        let value = self.with(|t| reduce_axis(t, axis, false))?;
        Ok(self.unary(Op::SumAxis { axis }, value))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'g>> {
        let value = self.with(|t| reduce_axis(t, axis, true))?;
        Ok(self.unary(Op::MeanAxis { axis }, value))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Var<'g>> {
        let x = self.value();
        if x.shape().is_empty() {
            return Err(Error::ShapeMismatch {
                op: "softmax_last",
                lhs: x.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let cols = *x.shape().last().unwrap();
        let rows = x.len() / cols;
        let out = k::softmax_rows(x.data(), rows, cols);
        let value = Tensor::from_vec(x.shape(), out)?;
        Ok(self.unary(Op::SoftmaxLast, value))
    }

    /// Mean over rows of `-log softmax(row)[label]` for `(B,C)` logits:
    /// the fused, numerically stable cross-entropy.
    pub fn cross_entropy_mean(&self, labels: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        if x.shape().len() != 2 || x.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_mean",
                lhs: x.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= cols {
                return Err(Error::LabelOutOfRange { label: y, classes: cols });
            }
            let row = &x.data()[r * cols..(r + 1) * cols];
            total += k::logsumexp_row(row) - row[y];
        }
        let value = Tensor::scalar(total / rows as f64);
        Ok(self.unary(
            Op::CrossEntropyMean {
                labels: labels.to_vec(),
            },
            value,
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        let expected: usize = shape.iter().product();
        if expected != x.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: x.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::from_vec(shape, x.data().to_vec())?;
        Ok(self.unary(Op::Reshape, value))
    }

    /// Back-propagate from a scalar root through the recorded tape,
    /// accumulating gradients into every node that requires them.
    pub fn backward(&self) -> Result<()> {
        {
            let mut nodes = self.graph.nodes.borrow_mut();
            let root = &mut nodes[self.id];
            if !root.value.is_scalar() {
                return Err(Error::NonScalarRoot(root.value.shape().to_vec()));
            }
            if !root.value.item().is_finite() {
                return Err(Error::NonFinite("backward root"));
            }
            root.grad = Some(vec![1.0]);
        }
        let mut nodes = self.graph.nodes.borrow_mut();
        for id in (0..=self.id).rev() {
            backward_node(&mut nodes, id)?;
        }
        Ok(())
    }
}

fn conv_dims(x: &Tensor, w: &Tensor, stride: usize, pad: usize, transpose: bool) -> Result<k::Conv2dDims> {
    if x.shape().len() != 4 || w.shape().len() != 4 || stride == 0 {
        return Err(Error::ShapeMismatch {
            op: if transpose { "conv_transpose2d" } else { "conv2d" },
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let (batch, c_in, h, w_len) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    // conv weight: (Cout,Cin,KH,KW); transposed conv weight: (Cin,Cout,KH,KW)
    let (w_cin, c_out) = if transpose {
        (w.shape()[0], w.shape()[1])
    } else {
        (w.shape()[1], w.shape()[0])
    };
    let (kh, kw) = (w.shape()[2], w.shape()[3]);
    let fits = if transpose {
        (h - 1) * stride + kh > 2 * pad && (w_len - 1) * stride + kw > 2 * pad
    } else {
        h + 2 * pad >= kh && w_len + 2 * pad >= kw
    };
    if w_cin != c_in || !fits {
        return Err(Error::ShapeMismatch {
            op: if transpose { "conv_transpose2d" } else { "conv2d" },
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    Ok(k::Conv2dDims {
        batch,
        c_in,
        c_out,
        h,
        w: w_len,
        kh,
        kw,
        stride,
        pad,
    })
}

fn reduce_axis(t: &Tensor, axis: usize, mean: bool) -> Result<Tensor> {
    if axis >= t.shape().len() {
        return Err(Error::InvalidArgument(format!(
            "axis {axis} out of range for shape {:?}",
            t.shape()
        )));
    }
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..axis_len {
            let base = (o * axis_len + j) * inner;
            for i in 0..inner {
                out[o * inner + i] += t.data()[base + i];
            }
        }
    }
    if mean {
        for v in &mut out {
            *v /= axis_len as f64;
        }
    }
    let mut out_shape: Vec<usize> = shape[..axis].to_vec();
    out_shape.extend_from_slice(&shape[axis + 1..]);
    Tensor::from_vec(&out_shape, out)
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Compute this node's contribution to each differentiable input and
/// accumulate. Inputs always precede the node on the tape, so a split
/// borrow keeps value reads and gradient writes disjoint.
fn backward_node(nodes: &mut [Node], id: usize) -> Result<()> {
    if nodes[id].grad.is_none() || !nodes[id].requires_grad {
        return Ok(());
    }
    let (before, rest) = nodes.split_at_mut(id);
    let node = &rest[0];
    let g = node.grad.as_deref().expect("checked above");
    let needs: Vec<bool> = node.inputs.iter().map(|&i| before[i].requires_grad).collect();
    if needs.iter().all(|&b| !b) {
        return Ok(());
    }
    let val = |idx: usize| -> &Tensor { &before[node.inputs[idx]].value };
    let mut contribs: Vec<(usize, Vec<f64>)> = Vec::with_capacity(node.inputs.len());
    let push = |contribs: &mut Vec<(usize, Vec<f64>)>, idx: usize, buf: Vec<f64>| {
        contribs.push((node.inputs[idx], buf));
    };

    match &node.op {
        Op::Leaf => {}
        Op::Add => {
            for idx in 0..2 {
                if needs[idx] {
                    push(&mut contribs, idx, g.to_vec());
                }
            }
        }
        Op::Sub => {
            if needs[0] {
                push(&mut contribs, 0, g.to_vec());
            }
            if needs[1] {
                push(&mut contribs, 1, g.iter().map(|v| -v).collect());
            }
        }
        Op::Mul => {
            if needs[0] {
                let b = val(1).data();
                push(&mut contribs, 0, g.iter().zip(b).map(|(gv, bv)| gv * bv).collect());
            }
            if needs[1] {
                let a = val(0).data();
                push(&mut contribs, 1, g.iter().zip(a).map(|(gv, av)| gv * av).collect());
            }
        }
        Op::Min | Op::Max => {
            let take_first = |a: f64, b: f64| match node.op {
                Op::Min => a <= b,
                _ => a >= b,
            };
            let a = val(0).data();
            let b = val(1).data();
            if needs[0] {
                let buf = g
                    .iter()
                    .zip(a.iter().zip(b))
                    .map(|(gv, (&av, &bv))| if take_first(av, bv) { *gv } else { 0.0 })
                    .collect();
                push(&mut contribs, 0, buf);
            }
            if needs[1] {
                let buf = g
                    .iter()
                    .zip(a.iter().zip(b))
                    .map(|(gv, (&av, &bv))| if take_first(av, bv) { 0.0 } else { *gv })
                    .collect();
                push(&mut contribs, 1, buf);
            }
        }
        Op::AddScalar => {
            if needs[0] {
                push(&mut contribs, 0, g.to_vec());
            }
        }
        Op::MulScalar(c) => {
            if needs[0] {
                push(&mut contribs, 0, g.iter().map(|v| v * c).collect());
            }
        }
        Op::Neg => {
            if needs[0] {
                push(&mut contribs, 0, g.iter().map(|v| -v).collect());
            }
        }
        Op::AddBias => {
            if needs[0] {
                push(&mut contribs, 0, g.to_vec());
            }
            if needs[1] {
                let n = val(1).len();
                let mut db = vec![0.0; n];
                for (i, gv) in g.iter().enumerate() {
                    db[i % n] += gv;
                }
                push(&mut contribs, 1, db);
            }
        }
        Op::MatMul => {
            let a = val(0);
            let b = val(1);
            let (m, kk) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if needs[0] {
                // dA = g @ B^T
                let mut da = vec![0.0; m * kk];
                for i in 0..m {
                    for l in 0..kk {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * b.data()[l * n + j];
                        }
                        da[i * kk + l] = acc;
                    }
                }
                push(&mut contribs, 0, da);
            }
            if needs[1] {
                // dB = A^T @ g
                let mut db = vec![0.0; kk * n];
                for i in 0..m {
                    let av_row = &a.data()[i * kk..(i + 1) * kk];
                    let g_row = &g[i * n..(i + 1) * n];
                    for (l, &av) in av_row.iter().enumerate() {
                        let db_row = &mut db[l * n..(l + 1) * n];
                        for j in 0..n {
                            db_row[j] += av * g_row[j];
                        }
                    }
                }
                push(&mut contribs, 1, db);
            }
        }
        Op::Conv2d { stride, pad } => {
            let x = val(0);
            let w = val(1);
            let d = conv_dims(x, w, *stride, *pad, false).expect("validated at forward");
            if needs[0] {
                let mut dx = vec![0.0; x.len()];
                k::conv2d_grad_input(g, w.data(), &mut dx, &d);
                push(&mut contribs, 0, dx);
            }
            if needs[1] {
                let mut dw = vec![0.0; w.len()];
                k::conv2d_grad_weight(x.data(), g, &mut dw, &d);
                push(&mut contribs, 1, dw);
            }
            if node.inputs.len() == 3 && needs[2] {
                let mut db = vec![0.0; d.c_out];
                k::grad_bias_channels(g, &mut db, d.batch, d.c_out, d.out_h() * d.out_w());
                push(&mut contribs, 2, db);
            }
        }
        Op::ConvTranspose2d { stride, pad } => {
            let x = val(0);
            let w = val(1);
            let d = conv_dims(x, w, *stride, *pad, true).expect("validated at forward");
            let oh = k::conv_transpose_out_len(d.h, d.kh, *stride, *pad);
            let ow = k::conv_transpose_out_len(d.w, d.kw, *stride, *pad);
            if needs[0] {
                let mut dx = vec![0.0; x.len()];
                k::conv_transpose2d_grad_input(g, w.data(), &mut dx, &d);
                push(&mut contribs, 0, dx);
            }
            if needs[1] {
                let mut dw = vec![0.0; w.len()];
                k::conv_transpose2d_grad_weight(x.data(), g, &mut dw, &d);
                push(&mut contribs, 1, dw);
            }
            if node.inputs.len() == 3 && needs[2] {
                let mut db = vec![0.0; d.c_out];
                k::grad_bias_channels(g, &mut db, d.batch, d.c_out, oh * ow);
                push(&mut contribs, 2, db);
            }
        }
        Op::DepthwiseConv2d => {
            let x = val(0);
            let kr = val(1);
            let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (kh, kw) = (kr.shape()[0], kr.shape()[1]);
            if needs[0] {
                let mut dx = vec![0.0; x.len()];
                k::depthwise_conv2d_grad_input(g, kr.data(), &mut dx, b * c, h, w, kh, kw);
                push(&mut contribs, 0, dx);
            }
            if needs[1] {
                let mut dk = vec![0.0; kr.len()];
                k::depthwise_conv2d_grad_kernel(x.data(), g, &mut dk, b * c, h, w, kh, kw);
                push(&mut contribs, 1, dk);
            }
        }
        Op::ReflectPad2d { pad } => {
            if needs[0] {
                let x = val(0);
                let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let mut dx = vec![0.0; x.len()];
                k::reflect_pad2d_grad_input(g, &mut dx, b * c, h, w, *pad);
                push(&mut contribs, 0, dx);
            }
        }
        Op::MaxPool2d { size } => {
            if needs[0] {
                let x = val(0);
                let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let mut dx = vec![0.0; x.len()];
                k::maxpool2d_grad_input(x.data(), g, &mut dx, b * c, h, w, *size);
                push(&mut contribs, 0, dx);
            }
        }
        Op::InstanceNorm2d { eps } => {
            if needs[0] {
                let x = val(0);
                let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let mut dx = vec![0.0; x.len()];
                k::instance_norm2d_grad_input(x.data(), node.value.data(), g, &mut dx, b * c, h * w, *eps);
                push(&mut contribs, 0, dx);
            }
        }
        Op::Relu => {
            if needs[0] {
                let x = val(0).data();
                push(
                    &mut contribs,
                    0,
                    g.iter().zip(x).map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 }).collect(),
                );
            }
        }
        Op::Tanh => {
            if needs[0] {
                let y = node.value.data();
                push(&mut contribs, 0, g.iter().zip(y).map(|(gv, &yv)| gv * (1.0 - yv * yv)).collect());
            }
        }
        Op::Exp => {
            if needs[0] {
                let y = node.value.data();
                push(&mut contribs, 0, g.iter().zip(y).map(|(gv, &yv)| gv * yv).collect());
            }
        }
        Op::Log => {
            if needs[0] {
                let x = val(0).data();
                push(&mut contribs, 0, g.iter().zip(x).map(|(gv, &xv)| gv / xv).collect());
            }
        }
        Op::Clamp { lo, hi } => {
            if needs[0] {
                let x = val(0).data();
                push(
                    &mut contribs,
                    0,
                    g.iter()
                        .zip(x)
                        .map(|(gv, &xv)| if xv >= *lo && xv <= *hi { *gv } else { 0.0 })
                        .collect(),
                );
            }
        }
        Op::SumAll => {
            if needs[0] {
                push(&mut contribs, 0, vec![g[0]; val(0).len()]);
            }
        }
        Op::MeanAll => {
            if needs[0] {
                let n = val(0).len();
                push(&mut contribs, 0, vec![g[0] / n as f64; n]);
            }
        }
        Op::SumAxis { axis } | Op::MeanAxis { axis } => {
            if needs[0] {
                let x = val(0);
                let shape = x.shape();
                let outer: usize = shape[..*axis].iter().product();
                let axis_len = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                    1.0 / axis_len as f64
                } else {
                    1.0
                };
                let mut dx = vec![0.0; x.len()];
                for o in 0..outer {
                    for j in 0..axis_len {
                        let base = (o * axis_len + j) * inner;
                        for i in 0..inner {
                            dx[base + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                push(&mut contribs, 0, dx);
            }
        }
        Op::SoftmaxLast => {
            if needs[0] {
                let y = node.value.data();
                let cols = *node.value.shape().last().unwrap();
                let rows = y.len() / cols;
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dx[r * cols + j] = ys[j] * (gs[j] - dot);
                    }
                }
                push(&mut contribs, 0, dx);
            }
        }
        Op::CrossEntropyMean { labels } => {
            if needs[0] {
                let x = val(0);
                let (rows, cols) = (x.shape()[0], x.shape()[1]);
                let soft = k::softmax_rows(x.data(), rows, cols);
                let scale = g[0] / rows as f64;
                let mut dx = soft;
                for (r, &y) in labels.iter().enumerate() {
                    dx[r * cols + y] -= 1.0;
                }
                for v in &mut dx {
                    *v *= scale;
                }
                push(&mut contribs, 0, dx);
            }
        }
        Op::Reshape => {
            if needs[0] {
                push(&mut contribs, 0, g.to_vec());
            }
        }
    }

    for (input_id, buf) in contribs {
        match before[input_id].grad.as_mut() {
            Some(existing) => add_assign(existing, &buf),
            None => before[input_id].grad = Some(buf),
        }
    }
    Ok(())
}
