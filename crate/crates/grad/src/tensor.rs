use std::cell::Cell;
use std::fmt;
use std::rc::Rc;

use crate::array::{self, Array, ConvGeom};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<usize> = const { Cell::new(0) };
}

fn next_id() -> usize {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Disables graph recording on this thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        Self::set(false)
    }

    pub(crate) fn set(enabled: bool) -> Self {
        let prev = GRAD_ENABLED.with(|c| c.replace(enabled));
        Self { prev }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

/// Run `f` with graph recording disabled.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _g = NoGradGuard::new();
    f()
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar,
    Exp,
    Log,
    Sqrt,
    Relu,
    Sigmoid,
    SumTo,
    BroadcastTo,
    Reshape,
    Extreme { mask: Rc<Array> },
    Narrow { axis: usize, start: usize },
    Pad { axis: usize, before: usize },
    MatMul,
    Transpose,
    AxisMatmul { axis: usize, matrix: Rc<Array> },
    Conv { geom: ConvGeom },
    ConvInputGrad { geom: ConvGeom },
    ConvWeightGrad { geom: ConvGeom },
}

pub(crate) struct Node {
    pub(crate) id: usize,
    pub(crate) value: Array,
    pub(crate) op: Option<Op>,
    pub(crate) parents: Vec<Tensor>,
    pub(crate) requires_grad: bool,
}

/// A node in the computation graph. Cloning is cheap (reference counted).
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.op)
            .finish()
    }
}

impl Tensor {
    fn leaf(value: Array, requires_grad: bool) -> Self {
        Tensor(Rc::new(Node {
            id: next_id(),
            value,
            op: None,
            parents: Vec::new(),
            requires_grad,
        }))
    }

    /// A constant: never receives gradients.
    pub fn constant(value: Array) -> Self {
        Self::leaf(value, false)
    }

    /// A trainable leaf.
    pub fn variable(value: Array) -> Self {
        Self::leaf(value, true)
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        Self::constant(Array::new(shape.to_vec(), data))
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(Array::scalar(v))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::constant(Array::zeros(shape))
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::constant(Array::ones(shape))
    }

    pub(crate) fn from_op(value: Array, op: Op, parents: Vec<Tensor>) -> Self {
        let requires_grad = is_grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Tensor(Rc::new(Node {
                id: next_id(),
                value,
                op: Some(op),
                parents,
                requires_grad,
            }))
        } else {
            Self::leaf(value, false)
        }
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn value(&self) -> &Array {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.0.value.data()
    }

    pub fn numel(&self) -> usize {
        self.0.value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.data()[0]
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.value().clone())
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&self, o: &Tensor) -> Tensor {
        let v = self.value().zip_broadcast(o.value(), |a, b| a + b);
        Tensor::from_op(v, Op::Add, vec![self.clone(), o.clone()])
    }

    pub fn sub(&self, o: &Tensor) -> Tensor {
        let v = self.value().zip_broadcast(o.value(), |a, b| a - b);
        Tensor::from_op(v, Op::Sub, vec![self.clone(), o.clone()])
    }

    pub fn mul(&self, o: &Tensor) -> Tensor {
        let v = self.value().zip_broadcast(o.value(), |a, b| a * b);
        Tensor::from_op(v, Op::Mul, vec![self.clone(), o.clone()])
    }

    pub fn div(&self, o: &Tensor) -> Tensor {
        let v = self.value().zip_broadcast(o.value(), |a, b| a / b);
        Tensor::from_op(v, Op::Div, vec![self.clone(), o.clone()])
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor::from_op(self.value().map(|x| x * c), Op::Scale(c), vec![self.clone()])
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        Tensor::from_op(self.value().map(|x| x + c), Op::AddScalar, vec![self.clone()])
    }

    pub fn exp(&self) -> Tensor {
        Tensor::from_op(self.value().map(f64::exp), Op::Exp, vec![self.clone()])
    }

    pub fn ln(&self) -> Tensor {
        Tensor::from_op(self.value().map(f64::ln), Op::Log, vec![self.clone()])
    }

    /// Square root; its derivative at exactly zero is taken as zero.
    pub fn sqrt(&self) -> Tensor {
        Tensor::from_op(self.value().map(f64::sqrt), Op::Sqrt, vec![self.clone()])
    }

    pub fn relu(&self) -> Tensor {
        Tensor::from_op(self.value().map(|x| x.max(0.0)), Op::Relu, vec![self.clone()])
    }

    pub fn sigmoid(&self) -> Tensor {
        Tensor::from_op(
            self.value().map(|x| 1.0 / (1.0 + (-x).exp())),
            Op::Sigmoid,
            vec![self.clone()],
        )
    }

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    // ---- shape -------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        Tensor::from_op(self.value().reshape(shape), Op::Reshape, vec![self.clone()])
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        Tensor::from_op(self.value().broadcast_to(shape), Op::BroadcastTo, vec![self.clone()])
    }

    /// Sum over axes so the result has `shape` (same rank, extent 1 on
    /// reduced axes).
    pub fn sum_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        Tensor::from_op(self.value().sum_to(shape), Op::SumTo, vec![self.clone()])
    }

    /// Sum over `axes`, keeping them with extent 1.
    pub fn sum_axes(&self, axes: &[usize]) -> Tensor {
        let mut shape = self.shape().to_vec();
        for &a in axes {
            shape[a] = 1;
        }
        self.sum_to(&shape)
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Tensor {
        let n: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.sum_axes(axes).scale(1.0 / n as f64)
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&self) -> Tensor {
        let ones = vec![1; self.shape().len()];
        self.sum_to(&ones).reshape(&[1])
    }

    pub fn mean_all(&self) -> Tensor {
        self.sum_all().scale(1.0 / self.numel() as f64)
    }

    pub fn max_along(&self, axis: usize) -> Tensor {
        self.extreme(axis, true)
    }

    pub fn min_along(&self, axis: usize) -> Tensor {
        self.extreme(axis, false)
    }

    fn extreme(&self, axis: usize, max: bool) -> Tensor {
        let (v, mask) = self.value().extreme_along(axis, max);
        Tensor::from_op(v, Op::Extreme { mask: Rc::new(mask) }, vec![self.clone()])
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        if start == 0 && len == self.shape()[axis] {
            return self.clone();
        }
        Tensor::from_op(
            self.value().narrow(axis, start, len),
            Op::Narrow { axis, start },
            vec![self.clone()],
        )
    }

    /// Zero-pad along `axis`.
    pub fn pad(&self, axis: usize, before: usize, after: usize) -> Tensor {
        if before == 0 && after == 0 {
            return self.clone();
        }
        Tensor::from_op(
            self.value().pad(axis, before, after),
            Op::Pad { axis, before },
            vec![self.clone()],
        )
    }

    /// Concatenate along `axis`.
    pub fn cat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "cat of zero tensors");
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut offset = 0;
        let mut acc: Option<Tensor> = None;
        for p in parts {
            let n = p.shape()[axis];
            let padded = p.pad(axis, offset, total - offset - n);
            offset += n;
            acc = Some(match acc {
                None => padded,
                Some(a) => a.add(&padded),
            });
        }
        acc.expect("non-empty")
    }

    pub fn matmul(&self, o: &Tensor) -> Tensor {
        Tensor::from_op(self.value().matmul(o.value()), Op::MatMul, vec![self.clone(), o.clone()])
    }

    pub fn t(&self) -> Tensor {
        Tensor::from_op(self.value().transpose2d(), Op::Transpose, vec![self.clone()])
    }

    /// Apply a constant linear map `[out, in]` along `axis`.
    pub fn axis_matmul(&self, axis: usize, matrix: Rc<Array>) -> Tensor {
        Tensor::from_op(
            self.value().axis_matmul(axis, &matrix),
            Op::AxisMatmul { axis, matrix },
            vec![self.clone()],
        )
    }

    // ---- convolution -------------------------------------------------

    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Tensor {
        let geom = ConvGeom { stride, pad };
        Tensor::from_op(
            array::conv2d(self.value(), weight.value(), geom),
            Op::Conv { geom },
            vec![self.clone(), weight.clone()],
        )
    }

    pub(crate) fn conv2d_input_grad(gy: &Tensor, w: &Tensor, geom: ConvGeom, hw: (usize, usize)) -> Tensor {
        Tensor::from_op(
            array::conv2d_input_grad(gy.value(), w.value(), geom, hw),
            Op::ConvInputGrad { geom },
            vec![gy.clone(), w.clone()],
        )
    }

    pub(crate) fn conv2d_weight_grad(x: &Tensor, gy: &Tensor, geom: ConvGeom, khw: (usize, usize)) -> Tensor {
        Tensor::from_op(
            array::conv2d_weight_grad(x.value(), gy.value(), geom, khw),
            Op::ConvWeightGrad { geom },
            vec![x.clone(), gy.clone()],
        )
    }
}
