//! Reverse-mode automatic differentiation on an append-only arena.
//!
//! Every operation records a node holding its output tensor; `Var` is an
//! index into the arena. `backward` walks the nodes in reverse and
//! accumulates gradients into every gradient-requiring leaf.

use std::cell::RefCell;

use rand::Rng;

use crate::conv::{
    conv2d_backward_input, conv2d_backward_kernel, conv2d_forward, conv_dims, maxpool2_forward,
    upsample2_backward, upsample2_forward, ConvDims,
};
use crate::error::{Error, Result};
use crate::special::{digamma, log_gamma, trigamma};
use crate::tensor::{broadcast_shape, Tensor};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Relu(Var),
    Softplus(Var),
    Lgamma(Var),
    Digamma(Var),
    Scale(Var, f64),
    AddScalar(Var),
    BiasAdd(Var, Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Conv2d { input: Var, kernel: Var, dims: ConvDims },
    MaxPool2 { input: Var, argmax: Vec<usize> },
    Upsample2(Var),
    Dropout { input: Var, keep: Vec<bool>, scale: f64 },
    GatherPixels { input: Var, indices: Vec<usize> },
    Sum { input: Var, axes: Vec<usize> },
    Mean { input: Var, axes: Vec<usize>, count: usize },
    Max { input: Var, argmax: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Relu(..) => "relu",
            Op::Softplus(..) => "softplus",
            Op::Lgamma(..) => "lgamma",
            Op::Digamma(..) => "digamma",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::BiasAdd(..) => "bias_add",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::Upsample2(..) => "upsample2",
            Op::Dropout { .. } => "dropout",
            Op::GatherPixels { .. } => "gather_pixels",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Max { .. } => "max",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Domain guard for unary ops: the error label and the predicate every
/// input element must satisfy.
type DomainCheck = (&'static str, fn(f64) -> bool);

#[derive(Default)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn stable_softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x > 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Record an input tensor. Gradients accumulate into it only when
    /// `requires_grad` is set.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Result<Var> {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar(&self, value: f64) -> Result<Var> {
        self.push(Op::Leaf, Tensor::scalar(value), false)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.inner.borrow().nodes[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().nodes[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.inner.borrow().nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.inner.borrow().nodes[v.0].grad.clone()
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        Ok(Var(inner.nodes.len() - 1))
    }

    fn binary(
        &self,
        op: fn(Var, Var) -> Op,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (value, rg) = {
            let inner = self.inner.borrow();
            let (na, nb) = (&inner.nodes[a.0], &inner.nodes[b.0]);
            let shape = broadcast_shape(name, na.value.shape(), nb.value.shape())?;
            let numel: usize = shape.iter().product();
            let (ad, bd) = (na.value.data(), nb.value.data());
            let (la, lb) = (ad.len(), bd.len());
            let data: Vec<f64> = if la == numel && lb == numel {
                ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
            } else {
                (0..numel).map(|i| f(ad[i % la], bd[i % lb])).collect()
            };
            (Tensor::new(shape, data)?, na.requires_grad || nb.requires_grad)
        };
        self.push(op(a, b), value, rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        {
            let inner = self.inner.borrow();
            if inner.nodes[b.0].value.data().contains(&0.0) {
                return Err(Error::Domain {
                    op: "div",
                    detail: "division by zero".into(),
                });
            }
        }
        self.binary(Op::Div, "div", a, b, |x, y| x / y)
    }

    fn unary(
        &self,
        op: fn(Var) -> Op,
        a: Var,
        f: impl Fn(f64) -> f64,
        domain: Option<DomainCheck>,
    ) -> Result<Var> {
        let (value, rg) = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[a.0];
            if let Some((name, ok)) = domain {
                if let Some(bad) = node.value.data().iter().find(|&&v| !ok(v)) {
                    return Err(Error::Domain {
                        op: name,
                        detail: format!("operand {bad} outside domain"),
                    });
                }
            }
            (node.value.map(&f), node.requires_grad)
        };
        self.push(op(a), value, rg)
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.unary(Op::Neg, a, |x| -x, None)
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(Op::Exp, a, f64::exp, None)
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        self.unary(Op::Log, a, f64::ln, Some(("log", |x| x > 0.0)))
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.unary(Op::Square, a, |x| x * x, None)
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(Op::Relu, a, |x| if x > 0.0 { x } else { 0.0 }, None)
    }

    pub fn softplus(&self, a: Var) -> Result<Var> {
        self.unary(Op::Softplus, a, stable_softplus, None)
    }

    pub fn lgamma(&self, a: Var) -> Result<Var> {
        let (value, rg) = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[a.0];
            let mut data = Vec::with_capacity(node.value.numel());
            for &v in node.value.data() {
                data.push(log_gamma(v)?);
            }
            (
                Tensor::new(node.value.shape().to_vec(), data)?,
                node.requires_grad,
            )
        };
        self.push(Op::Lgamma(a), value, rg)
    }

    pub fn digamma(&self, a: Var) -> Result<Var> {
        let (value, rg) = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[a.0];
            let mut data = Vec::with_capacity(node.value.numel());
            for &v in node.value.data() {
                data.push(digamma(v)?);
            }
            (
                Tensor::new(node.value.shape().to_vec(), data)?,
                node.requires_grad,
            )
        };
        self.push(Op::Digamma(a), value, rg)
    }

    pub fn scale(&self, a: Var, factor: f64) -> Result<Var> {
        let (value, rg) = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[a.0];
            (node.value.map(|x| x * factor), node.requires_grad)
        };
        self.push(Op::Scale(a, factor), value, rg)
    }

    pub fn add_scalar(&self, a: Var, offset: f64) -> Result<Var> {
        let (value, rg) = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[a.0];
            (node.value.map(|x| x + offset), node.requires_grad)
        };
        self.push(Op::AddScalar(a), value, rg)
    }

    /// Adds a per-channel bias of shape [C] to a tensor whose axis 1 is the
    /// channel axis, e.g. [N, C, H, W].
    pub fn bias_add(&self, a: Var, bias: Var) -> Result<Var> {
        let (value, rg) = {
            let inner = self.inner.borrow();
            let (na, nb) = (&inner.nodes[a.0], &inner.nodes[bias.0]);
            let shape = na.value.shape();
            if shape.len() < 2 || nb.value.shape() != [shape[1]] {
                return Err(Error::ShapeMismatch {
                    op: "bias_add",
                    lhs: shape.to_vec(),
                    rhs: nb.value.shape().to_vec(),
                });
            }
            let c = shape[1];
            let inner_len: usize = shape[2..].iter().product();
            let bd = nb.value.data();
            let mut data = Vec::with_capacity(na.value.numel());
            for (i, &v) in na.value.data().iter().enumerate() {
                data.push(v + bd[(i / inner_len) % c]);
            }
            (
                Tensor::new(shape.to_vec(), data)?,
                na.requires_grad || nb.requires_grad,
            )
        };
        self.push(Op::BiasAdd(a, bias), value, rg)
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let (value, rg) = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[a.0];
            (node.value.reshape(shape)?, node.requires_grad)
        };
        self.push(Op::Reshape(a), value, rg)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::EmptyReduction { op: "concat" });
        }
        let (value, rg) = {
            let inner = self.inner.borrow();
            let first = inner.nodes[inputs[0].0].value.shape().to_vec();
            if axis >= first.len() {
                return Err(Error::Domain {
                    op: "concat",
                    detail: format!("axis {axis} out of range for rank {}", first.len()),
                });
            }
            let mut total = 0usize;
            let mut rg = false;
            for &v in inputs {
                let n = &inner.nodes[v.0];
                let s = n.value.shape();
                if s.len() != first.len()
                    || s[..axis] != first[..axis]
                    || s[axis + 1..] != first[axis + 1..]
                {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: first.clone(),
                        rhs: s.to_vec(),
                    });
                }
                total += s[axis];
                rg |= n.requires_grad;
            }
            let mut shape = first.clone();
            shape[axis] = total;
            let outer: usize = first[..axis].iter().product();
            let tail: usize = first[axis + 1..].iter().product();
            let mut data = vec![0.0; shape.iter().product()];
            let mut offset = 0usize;
            for &v in inputs {
                let n = &inner.nodes[v.0];
                let e = n.value.shape()[axis];
                let src = n.value.data();
                for o in 0..outer {
                    let dst_base = (o * total + offset) * tail;
                    let src_base = o * e * tail;
                    data[dst_base..dst_base + e * tail]
                        .copy_from_slice(&src[src_base..src_base + e * tail]);
                }
                offset += e;
            }
            (Tensor::new(shape, data)?, rg)
        };
        self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            value,
            rg,
        )
    }

    pub fn conv2d(&self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (value, dims, rg) = {
            let inner = self.inner.borrow();
            let (ni, nk) = (&inner.nodes[input.0], &inner.nodes[kernel.0]);
            let dims = conv_dims(ni.value.shape(), nk.value.shape(), stride, padding)?;
            let out = conv2d_forward(ni.value.data(), nk.value.data(), &dims);
            (
                Tensor::new(vec![dims.n, dims.f, dims.oh, dims.ow], out)?,
                dims,
                ni.requires_grad || nk.requires_grad,
            )
        };
        self.push(Op::Conv2d { input, kernel, dims }, value, rg)
    }

    pub fn maxpool2(&self, input: Var) -> Result<Var> {
        let (value, argmax, rg) = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[input.0];
            let (out, argmax, shape) = maxpool2_forward(node.value.data(), node.value.shape())?;
            (Tensor::new(shape, out)?, argmax, node.requires_grad)
        };
        self.push(Op::MaxPool2 { input, argmax }, value, rg)
    }

    pub fn upsample2(&self, input: Var) -> Result<Var> {
        let (value, rg) = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[input.0];
            let (out, shape) = upsample2_forward(node.value.data(), node.value.shape())?;
            (Tensor::new(shape, out)?, node.requires_grad)
        };
        self.push(Op::Upsample2(input), value, rg)
    }

    /// Inverted dropout: kept activations are rescaled by 1/(1-rate) so the
    /// expectation is unchanged. Identity when not training or rate is 0.
    pub fn dropout(
        &self,
        input: Var,
        rate: f64,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Domain {
                op: "dropout",
                detail: format!("rate {rate} outside [0, 1)"),
            });
        }
        if !training || rate == 0.0 {
            return Ok(input);
        }
        let scale = 1.0 / (1.0 - rate);
        let (value, keep, rg) = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[input.0];
            let keep: Vec<bool> = (0..node.value.numel())
                .map(|_| rng.random::<f64>() >= rate)
                .collect();
            let data: Vec<f64> = node
                .value
                .data()
                .iter()
                .zip(&keep)
                .map(|(&v, &k)| if k { v * scale } else { 0.0 })
                .collect();
            (
                Tensor::new(node.value.shape().to_vec(), data)?,
                keep,
                node.requires_grad,
            )
        };
        self.push(Op::Dropout { input, keep, scale }, value, rg)
    }

    /// Select pixels by flat spatial index: [.., H, W] becomes [.., M] with
    /// out[.., m] = in[.., indices[m]]. Gradients scatter-add back.
    pub fn gather_pixels(&self, input: Var, indices: &[usize]) -> Result<Var> {
        let (value, rg) = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[input.0];
            let shape = node.value.shape();
            if shape.len() < 2 {
                return Err(Error::Domain {
                    op: "gather_pixels",
                    detail: format!("rank {} input has no spatial axes", shape.len()),
                });
            }
            let hw = shape[shape.len() - 2] * shape[shape.len() - 1];
            if let Some(&bad) = indices.iter().find(|&&i| i >= hw) {
                return Err(Error::Domain {
                    op: "gather_pixels",
                    detail: format!("index {bad} out of range for {hw} pixels"),
                });
            }
            let planes: usize = shape[..shape.len() - 2].iter().product();
            let data = node.value.data();
            let mut out = Vec::with_capacity(planes * indices.len());
            for p in 0..planes {
                let base = p * hw;
                out.extend(indices.iter().map(|&i| data[base + i]));
            }
            let mut out_shape = shape[..shape.len() - 2].to_vec();
            out_shape.push(indices.len());
            (Tensor::new(out_shape, out)?, node.requires_grad)
        };
        self.push(
            Op::GatherPixels {
                input,
                indices: indices.to_vec(),
            },
            value,
            rg,
        )
    }

    fn check_axes(op: &'static str, shape: &[usize], axes: &[usize]) -> Result<()> {
        if axes.is_empty() {
            return Err(Error::EmptyReduction { op });
        }
        for w in axes.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Domain {
                    op,
                    detail: format!("axes {axes:?} must be strictly increasing"),
                });
            }
        }
        if *axes.last().unwrap() >= shape.len() {
            return Err(Error::Domain {
                op,
                detail: format!("axes {axes:?} out of range for rank {}", shape.len()),
            });
        }
        Ok(())
    }

    fn reduce_prep(shape: &[usize], axes: &[usize]) -> (Vec<usize>, usize) {
        let mut reduced = vec![false; shape.len()];
        for &ax in axes {
            reduced[ax] = true;
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !reduced[*i])
            .map(|(_, &e)| e)
            .collect();
        let count = axes.iter().map(|&ax| shape[ax]).product();
        (out_shape, count)
    }

    pub fn sum_axes(&self, input: Var, axes: &[usize]) -> Result<Var> {
        let (value, rg) = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[input.0];
            let shape = node.value.shape();
            Self::check_axes("sum", shape, axes)?;
            let (out_shape, _) = Self::reduce_prep(shape, axes);
            let mut out = vec![0.0; out_shape.iter().product()];
            for_each_reduced(shape, axes, |in_flat, out_flat| {
                out[out_flat] += node.value.data()[in_flat];
            });
            (Tensor::new(out_shape, out)?, node.requires_grad)
        };
        self.push(
            Op::Sum {
                input,
                axes: axes.to_vec(),
            },
            value,
            rg,
        )
    }

    pub fn mean_axes(&self, input: Var, axes: &[usize]) -> Result<Var> {
        let (value, count, rg) = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[input.0];
            let shape = node.value.shape();
            Self::check_axes("mean", shape, axes)?;
            let (out_shape, count) = Self::reduce_prep(shape, axes);
            if count == 0 {
                return Err(Error::EmptyReduction { op: "mean" });
            }
            let inv = 1.0 / count as f64;
            let mut out = vec![0.0; out_shape.iter().product()];
            for_each_reduced(shape, axes, |in_flat, out_flat| {
                out[out_flat] += node.value.data()[in_flat];
            });
            for v in out.iter_mut() {
                *v *= inv;
            }
            (Tensor::new(out_shape, out)?, count, node.requires_grad)
        };
        self.push(
            Op::Mean {
                input,
                axes: axes.to_vec(),
                count,
            },
            value,
            rg,
        )
    }

    pub fn max_axes(&self, input: Var, axes: &[usize]) -> Result<Var> {
        let (value, argmax, rg) = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[input.0];
            let shape = node.value.shape();
            Self::check_axes("max", shape, axes)?;
            let (out_shape, count) = Self::reduce_prep(shape, axes);
            if count == 0 {
                return Err(Error::EmptyReduction { op: "max" });
            }
            let out_numel: usize = out_shape.iter().product();
            let mut out = vec![f64::NEG_INFINITY; out_numel];
            let mut argmax = vec![usize::MAX; out_numel];
            for_each_reduced(shape, axes, |in_flat, out_flat| {
                let v = node.value.data()[in_flat];
                if v > out[out_flat] || argmax[out_flat] == usize::MAX {
                    out[out_flat] = v;
                    argmax[out_flat] = in_flat;
                }
            });
            (Tensor::new(out_shape, out)?, argmax, node.requires_grad)
        };
        self.push(Op::Max { input, argmax }, value, rg)
    }

    pub fn sum_all(&self, input: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(input).len()).collect();
        if axes.is_empty() {
            // Already a scalar; reshape keeps gradients flowing.
            return self.reshape(input, vec![]);
        }
        self.sum_axes(input, &axes)
    }

    pub fn mean_all(&self, input: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(input).len()).collect();
        if axes.is_empty() {
            return self.reshape(input, vec![]);
        }
        self.mean_axes(input, &axes)
    }

    /// Class indices of the channel argmax, detached from the graph.
    pub fn argmax_detached(&self, input: Var, axis: usize) -> Result<Vec<usize>> {
        self.value(input).argmax_axis(axis)
    }

    /// Reverse sweep from a scalar loss. Runs once per tape.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.backward_done {
            return Err(Error::BackwardRanTwice);
        }
        let loss_node = &inner.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss_node.value.shape().to_vec(),
            });
        }
        if !loss_node.requires_grad {
            return Err(Error::DetachedLoss);
        }
        inner.backward_done = true;

        let n = inner.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let nodes = &inner.nodes;
        for idx in (0..=loss.0).rev() {
            let Some(up) = grads[idx].take() else { continue };
            if matches!(nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(up);
                continue;
            }
            backprop(nodes, &mut grads, idx, &up)?;
        }
        for (idx, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if inner.nodes[idx].requires_grad {
                    let shape = inner.nodes[idx].value.shape().to_vec();
                    inner.nodes[idx].grad = Some(Tensor::new(shape, g)?);
                }
            }
        }
        Ok(())
    }
}

/// Calls `f(in_flat, out_flat)` for every element, where `out_flat` indexes
/// the tensor with `axes` removed.
fn for_each_reduced(shape: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    let mut reduced = vec![false; rank];
    for &ax in axes {
        reduced[ax] = true;
    }
    // Strides of the output tensor laid over the input's kept axes.
    let mut out_stride = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..rank).rev() {
        if !reduced[i] {
            out_stride[i] = acc;
            acc *= shape[i];
        }
    }
    let numel: usize = shape.iter().product();
    let mut coords = vec![0usize; rank];
    let mut out_flat = 0usize;
    for in_flat in 0..numel {
        f(in_flat, out_flat);
        // Odometer increment, updating out_flat alongside.
        for i in (0..rank).rev() {
            coords[i] += 1;
            if !reduced[i] {
                out_flat += out_stride[i];
            }
            if coords[i] < shape[i] {
                break;
            }
            if !reduced[i] {
                out_flat -= out_stride[i] * shape[i];
            }
            coords[i] = 0;
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

fn backprop(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    idx: usize,
    up: &[f64],
) -> Result<()> {
    let rg = |v: Var| nodes[v.0].requires_grad;
    let val = |v: Var| nodes[v.0].value.data();
    let len = |v: Var| nodes[v.0].value.numel();
    match &nodes[idx].op {
        Op::Leaf => unreachable!("leaves are not dispatched"),
        Op::Add(a, b) => {
            if rg(*a) {
                let (la, g) = (len(*a), accumulate(grads, a.0, len(*a)));
                for (i, &u) in up.iter().enumerate() {
                    g[i % la] += u;
                }
            }
            if rg(*b) {
                let (lb, g) = (len(*b), accumulate(grads, b.0, len(*b)));
                for (i, &u) in up.iter().enumerate() {
                    g[i % lb] += u;
                }
            }
        }
        Op::Sub(a, b) => {
            if rg(*a) {
                let (la, g) = (len(*a), accumulate(grads, a.0, len(*a)));
                for (i, &u) in up.iter().enumerate() {
                    g[i % la] += u;
                }
            }
            if rg(*b) {
                let (lb, g) = (len(*b), accumulate(grads, b.0, len(*b)));
                for (i, &u) in up.iter().enumerate() {
                    g[i % lb] -= u;
                }
            }
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                let (la, bv) = (len(*a), val(*b));
                let lb = bv.len();
                let g = accumulate(grads, a.0, la);
                for (i, &u) in up.iter().enumerate() {
                    g[i % la] += u * bv[i % lb];
                }
            }
            if rg(*b) {
                let (lb, av) = (len(*b), val(*a));
                let la = av.len();
                let g = accumulate(grads, b.0, lb);
                for (i, &u) in up.iter().enumerate() {
                    g[i % lb] += u * av[i % la];
                }
            }
        }
        Op::Div(a, b) => {
            let outv = nodes[idx].value.data();
            if rg(*a) {
                let (la, bv) = (len(*a), val(*b));
                let lb = bv.len();
                let g = accumulate(grads, a.0, la);
                for (i, &u) in up.iter().enumerate() {
                    g[i % la] += u / bv[i % lb];
                }
            }
            if rg(*b) {
                let (lb, bv) = (len(*b), val(*b));
                let g = accumulate(grads, b.0, lb);
                for (i, &u) in up.iter().enumerate() {
                    g[i % lb] -= u * outv[i] / bv[i % lb];
                }
            }
        }
        Op::Neg(a) => {
            if rg(*a) {
                let g = accumulate(grads, a.0, len(*a));
                for (gi, &u) in g.iter_mut().zip(up) {
                    *gi -= u;
                }
            }
        }
        Op::Exp(a) => {
            if rg(*a) {
                let outv = nodes[idx].value.data();
                let g = accumulate(grads, a.0, len(*a));
                for i in 0..up.len() {
                    g[i] += up[i] * outv[i];
                }
            }
        }
        Op::Log(a) => {
            if rg(*a) {
                let av = val(*a);
                let g = accumulate(grads, a.0, len(*a));
                for i in 0..up.len() {
                    g[i] += up[i] / av[i];
                }
            }
        }
        Op::Square(a) => {
            if rg(*a) {
                let av = val(*a);
                let g = accumulate(grads, a.0, len(*a));
                for i in 0..up.len() {
                    g[i] += 2.0 * av[i] * up[i];
                }
            }
        }
        Op::Relu(a) => {
            if rg(*a) {
                let av = val(*a);
                let g = accumulate(grads, a.0, len(*a));
                for i in 0..up.len() {
                    if av[i] > 0.0 {
                        g[i] += up[i];
                    }
                }
            }
        }
        Op::Softplus(a) => {
            if rg(*a) {
                let av = val(*a);
                let g = accumulate(grads, a.0, len(*a));
                for i in 0..up.len() {
                    g[i] += up[i] * stable_sigmoid(av[i]);
                }
            }
        }
        Op::Lgamma(a) => {
            if rg(*a) {
                let av = val(*a);
                let mut psi = Vec::with_capacity(av.len());
                for &x in av {
                    psi.push(digamma(x)?);
                }
                let g = accumulate(grads, a.0, av.len());
                for i in 0..up.len() {
                    g[i] += up[i] * psi[i];
                }
            }
        }
        Op::Digamma(a) => {
            if rg(*a) {
                let av = val(*a);
                let mut psi1 = Vec::with_capacity(av.len());
                for &x in av {
                    psi1.push(trigamma(x)?);
                }
                let g = accumulate(grads, a.0, av.len());
                for i in 0..up.len() {
                    g[i] += up[i] * psi1[i];
                }
            }
        }
        Op::Scale(a, factor) => {
            if rg(*a) {
                let f = *factor;
                let g = accumulate(grads, a.0, len(*a));
                for i in 0..up.len() {
                    g[i] += up[i] * f;
                }
            }
        }
        Op::AddScalar(a) => {
            if rg(*a) {
                let g = accumulate(grads, a.0, len(*a));
                for (gi, &u) in g.iter_mut().zip(up) {
                    *gi += u;
                }
            }
        }
        Op::BiasAdd(a, b) => {
            if rg(*a) {
                let g = accumulate(grads, a.0, len(*a));
                for (gi, &u) in g.iter_mut().zip(up) {
                    *gi += u;
                }
            }
            if rg(*b) {
                let shape = nodes[a.0].value.shape();
                let c = shape[1];
                let inner_len: usize = shape[2..].iter().product();
                let g = accumulate(grads, b.0, c);
                for (i, &u) in up.iter().enumerate() {
                    g[(i / inner_len) % c] += u;
                }
            }
        }
        Op::Reshape(a) => {
            if rg(*a) {
                let g = accumulate(grads, a.0, len(*a));
                for (gi, &u) in g.iter_mut().zip(up) {
                    *gi += u;
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let out_shape = nodes[idx].value.shape();
            let total = out_shape[*axis];
            let outer: usize = out_shape[..*axis].iter().product();
            let tail: usize = out_shape[*axis + 1..].iter().product();
            let mut offset = 0usize;
            for &v in inputs {
                let e = nodes[v.0].value.shape()[*axis];
                if rg(v) {
                    let g = accumulate(grads, v.0, len(v));
                    for o in 0..outer {
                        let src = (o * total + offset) * tail;
                        let dst = o * e * tail;
                        for i in 0..e * tail {
                            g[dst + i] += up[src + i];
                        }
                    }
                }
                offset += e;
            }
        }
        Op::Conv2d { input, kernel, dims } => {
            if rg(*input) {
                let din = conv2d_backward_input(up, val(*kernel), dims);
                let g = accumulate(grads, input.0, len(*input));
                for (gi, d) in g.iter_mut().zip(&din) {
                    *gi += d;
                }
            }
            if rg(*kernel) {
                let dk = conv2d_backward_kernel(up, val(*input), dims);
                let g = accumulate(grads, kernel.0, len(*kernel));
                for (gi, d) in g.iter_mut().zip(&dk) {
                    *gi += d;
                }
            }
        }
        Op::MaxPool2 { input, argmax } => {
            if rg(*input) {
                let g = accumulate(grads, input.0, len(*input));
                for (o, &ii) in argmax.iter().enumerate() {
                    g[ii] += up[o];
                }
            }
        }
        Op::Upsample2(a) => {
            if rg(*a) {
                let din = upsample2_backward(up, nodes[a.0].value.shape());
                let g = accumulate(grads, a.0, len(*a));
                for (gi, d) in g.iter_mut().zip(&din) {
                    *gi += d;
                }
            }
        }
        Op::Dropout { input, keep, scale } => {
            if rg(*input) {
                let s = *scale;
                let g = accumulate(grads, input.0, len(*input));
                for i in 0..up.len() {
                    if keep[i] {
                        g[i] += up[i] * s;
                    }
                }
            }
        }
        Op::GatherPixels { input, indices } => {
            if rg(*input) {
                let shape = nodes[input.0].value.shape();
                let hw = shape[shape.len() - 2] * shape[shape.len() - 1];
                let planes: usize = shape[..shape.len() - 2].iter().product();
                let g = accumulate(grads, input.0, len(*input));
                for p in 0..planes {
                    let gbase = p * hw;
                    let ubase = p * indices.len();
                    for (m, &i) in indices.iter().enumerate() {
                        g[gbase + i] += up[ubase + m];
                    }
                }
            }
        }
        Op::Sum { input, axes } => {
            if rg(*input) {
                let shape = nodes[input.0].value.shape().to_vec();
                let g = accumulate(grads, input.0, len(*input));
                for_each_reduced(&shape, axes, |in_flat, out_flat| {
                    g[in_flat] += up[out_flat];
                });
            }
        }
        Op::Mean { input, axes, count } => {
            if rg(*input) {
                let inv = 1.0 / *count as f64;
                let shape = nodes[input.0].value.shape().to_vec();
                let g = accumulate(grads, input.0, len(*input));
                for_each_reduced(&shape, axes, |in_flat, out_flat| {
                    g[in_flat] += up[out_flat] * inv;
                });
            }
        }
        Op::Max { input, argmax, .. } => {
            if rg(*input) {
                let g = accumulate(grads, input.0, len(*input));
                for (o, &ii) in argmax.iter().enumerate() {
                    g[ii] += up[o];
                }
            }
        }
    }
    Ok(())
}
