//! Reverse-mode autodiff over a recorded operation tape.
//!
//! A [`Graph`] owns every tensor produced during a forward pass; operations
//! evaluate eagerly and append a node describing how the value was computed.
//! Backward walks the tape in reverse and emits each vector-Jacobian product
//! as *new graph nodes*, so a gradient is itself a differentiable expression.
//! That is what lets the critic's gradient-norm penalty be trained: the norm
//! of an input gradient is an ordinary node and can be differentiated again
//! with respect to the critic weights.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvGeom};
use crate::tensor::{shape, Tensor};

pub use crate::tensor::kernels::Padding;

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorRef(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    Bilinear,
    Nearest,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorRef, TensorRef),
    Sub(TensorRef, TensorRef),
    Mul(TensorRef, TensorRef),
    Div(TensorRef, TensorRef),
    Scale(TensorRef, f64),
    AddScalar(TensorRef),
    Log(TensorRef),
    Exp(TensorRef),
    Sqrt(TensorRef),
    Sigmoid(TensorRef),
    Abs(TensorRef),
    LeakyRelu(TensorRef, f64),
    ClampMin(TensorRef, f64),
    Matmul(TensorRef, TensorRef),
    Transpose2d(TensorRef),
    Reshape(TensorRef),
    Softmax(TensorRef, usize),
    SumAll(TensorRef),
    SumAxis { x: TensorRef, axis: usize, keepdims: bool },
    BroadcastTo(TensorRef),
    Concat { xs: Vec<TensorRef>, axis: usize },
    Slice { x: TensorRef, axis: usize, start: usize, len: usize },
    Conv2d { x: TensorRef, k: TensorRef, meta: ConvMeta },
    /// Adjoint of `Conv2d` in its input; `gout` is shaped like the conv output.
    ConvGradInput { gout: TensorRef, k: TensorRef, meta: ConvMeta },
    /// Adjoint of `Conv2d` in its kernel.
    ConvGradKernel { x: TensorRef, gout: TensorRef, meta: ConvMeta },
    Upsample { x: TensorRef, mode: UpsampleMode },
    /// Adjoint of `Upsample`: scatters an output-shaped cotangent back.
    UpsampleAdjoint { gout: TensorRef, mode: UpsampleMode },
}

#[derive(Debug, Clone, Copy)]
struct ConvMeta {
    stride: usize,
    dilation: usize,
    padding: Padding,
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Recorded forward computation plus its differentiation machinery.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tensor as a differentiation root (parameter or probed input).
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorRef {
        self.push_unchecked(value, requires_grad, Op::Leaf)
    }

    /// Inserts a tensor that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> TensorRef {
        self.push_unchecked(value, false, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> TensorRef {
        self.constant(Tensor::scalar(v))
    }

    /// Re-inserts the current value of `x` as a constant, cutting gradient flow.
    pub fn detach(&mut self, x: TensorRef) -> TensorRef {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn value(&self, x: TensorRef) -> &Tensor {
        &self.nodes[x.0].value
    }

    /// Gradient accumulated by [`Graph::backward`]; `None` until populated.
    pub fn grad(&self, x: TensorRef) -> Option<&Tensor> {
        self.nodes[x.0].grad.as_ref()
    }

    pub fn requires_grad(&self, x: TensorRef) -> bool {
        self.nodes[x.0].requires_grad
    }

    fn push_unchecked(&mut self, value: Tensor, requires_grad: bool, op: Op) -> TensorRef {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        TensorRef(self.nodes.len() - 1)
    }

    /// Appends a computed node, rejecting non-finite results so numeric error
    /// states surface at the op that produced them.
    fn push(&mut self, value: Tensor, op: Op, ctx: &str) -> Result<TensorRef> {
        value.check_finite(ctx)?;
        let requires_grad = self.op_inputs(&op).iter().any(|r| self.nodes[r.0].requires_grad);
        Ok(self.push_unchecked(value, requires_grad, op))
    }

    fn op_inputs(&self, op: &Op) -> Vec<TensorRef> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Matmul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Sqrt(a)
            | Op::Sigmoid(a)
            | Op::Abs(a)
            | Op::LeakyRelu(a, _)
            | Op::ClampMin(a, _)
            | Op::Transpose2d(a)
            | Op::Reshape(a)
            | Op::Softmax(a, _)
            | Op::SumAll(a)
            | Op::BroadcastTo(a) => vec![*a],
            Op::SumAxis { x, .. } | Op::Slice { x, .. } | Op::Upsample { x, .. } => vec![*x],
            Op::UpsampleAdjoint { gout, .. } => vec![*gout],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Conv2d { x, k, .. } => vec![*x, *k],
            Op::ConvGradInput { gout, k, .. } => vec![*gout, *k],
            Op::ConvGradKernel { x, gout, .. } => vec![*x, *gout],
        }
    }

    // ---------------------------------------------------------------- ops --

    fn elementwise2(
        &mut self,
        a: TensorRef,
        b: TensorRef,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorRef> {
        shape::require_equal(self.value(a).shape(), self.value(b).shape(), name)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(t, op, name)
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.elementwise2(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.elementwise2(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.elementwise2(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.elementwise2(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn elementwise1(
        &mut self,
        a: TensorRef,
        name: &str,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<TensorRef> {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(t, op, name)
    }

    pub fn scale(&mut self, a: TensorRef, c: f64) -> Result<TensorRef> {
        self.elementwise1(a, "scale", |x| c * x, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: TensorRef, c: f64) -> Result<TensorRef> {
        self.elementwise1(a, "add_scalar", |x| x + c, Op::AddScalar(a))
    }

    pub fn log(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.elementwise1(a, "log", f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.elementwise1(a, "exp", f64::exp, Op::Exp(a))
    }

    pub fn sqrt(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.elementwise1(a, "sqrt", f64::sqrt, Op::Sqrt(a))
    }

    pub fn sigmoid(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.elementwise1(a, "sigmoid", |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.elementwise1(a, "abs", f64::abs, Op::Abs(a))
    }

    /// `x` for `x > 0`, else `slope * x`. `slope = 0` is a plain ReLU.
    pub fn leaky_relu(&mut self, a: TensorRef, slope: f64) -> Result<TensorRef> {
        self.elementwise1(
            a,
            "leaky_relu",
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn clamp_min(&mut self, a: TensorRef, min: f64) -> Result<TensorRef> {
        self.elementwise1(a, "clamp_min", |x| x.max(min), Op::ClampMin(a, min))
    }

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul expects [m,p]x[p,n], got {sa:?} x {sb:?}")));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), sa[0], sa[1], sb[1]);
        let t = Tensor::new(vec![sa[0], sb[1]], data)?;
        self.push(t, Op::Matmul(a, b), "matmul")
    }

    pub fn transpose2d(&mut self, a: TensorRef) -> Result<TensorRef> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::shape(format!("transpose2d expects rank 2, got {s:?}")));
        }
        let data = kernels::transpose2d(self.value(a).data(), s[0], s[1]);
        let t = Tensor::new(vec![s[1], s[0]], data)?;
        self.push(t, Op::Transpose2d(a), "transpose2d")
    }

    pub fn reshape(&mut self, a: TensorRef, new_shape: &[usize]) -> Result<TensorRef> {
        let v = self.value(a);
        let numel: usize = new_shape.iter().product();
        if numel != v.numel() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {:?} changes element count",
                v.shape(),
                new_shape
            )));
        }
        let t = Tensor::new(new_shape.to_vec(), v.data().to_vec())?;
        self.push(t, Op::Reshape(a), "reshape")
    }

    /// Shifted softmax along `axis`; every lane sums to 1.
    pub fn softmax(&mut self, a: TensorRef, axis: usize) -> Result<TensorRef> {
        let v = self.value(a);
        if axis >= v.rank() {
            return Err(Error::invalid(format!("softmax axis {axis} out of range for {:?}", v.shape())));
        }
        let data = kernels::softmax(v.data(), v.shape(), axis);
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.push(t, Op::Softmax(a, axis), "softmax")
    }

    pub fn sum_all(&mut self, a: TensorRef) -> Result<TensorRef> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), "sum_all")
    }

    pub fn mean_all(&mut self, a: TensorRef) -> Result<TensorRef> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::invalid("mean_all over empty tensor".to_string()));
        }
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum_axis(&mut self, a: TensorRef, axis: usize, keepdims: bool) -> Result<TensorRef> {
        let v = self.value(a);
        if axis >= v.rank() {
            return Err(Error::invalid(format!("sum_axis axis {axis} out of range for {:?}", v.shape())));
        }
        let data = kernels::sum_axis(v.data(), v.shape(), axis);
        let mut out_shape: Vec<usize> = v.shape().to_vec();
        if keepdims {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let t = Tensor::new(out_shape, data)?;
        self.push(t, Op::SumAxis { x: a, axis, keepdims }, "sum_axis")
    }

    pub fn mean_axis(&mut self, a: TensorRef, axis: usize, keepdims: bool) -> Result<TensorRef> {
        let n = self.value(a).shape()[axis];
        let s = self.sum_axis(a, axis, keepdims)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Explicit broadcast: trailing axes align, extent-1 axes repeat. This is
    /// the only rank promotion in the graph — elementwise ops require equal
    /// shapes.
    pub fn broadcast_to(&mut self, a: TensorRef, to: &[usize]) -> Result<TensorRef> {
        let v = self.value(a);
        if !shape::broadcast_compatible(v.shape(), to) {
            return Err(Error::shape(format!("cannot broadcast {:?} to {:?}", v.shape(), to)));
        }
        if v.shape() == to {
            // Still records a node so the VJP reduction stays uniform.
            let t = v.clone();
            return self.push(t, Op::BroadcastTo(a), "broadcast_to");
        }
        let data = kernels::broadcast_to(v.data(), v.shape(), to);
        let t = Tensor::new(to.to_vec(), data)?;
        self.push(t, Op::BroadcastTo(a), "broadcast_to")
    }

    pub fn concat(&mut self, xs: &[TensorRef], axis: usize) -> Result<TensorRef> {
        if xs.is_empty() {
            return Err(Error::invalid("concat of zero tensors".to_string()));
        }
        let first = self.value(xs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0usize;
        for &x in xs {
            let s = self.value(x).shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(format!(
                    "concat shapes must match off-axis: {s:?} vs {first:?} on axis {axis}"
                )));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = kernels::lanes(&out_shape, axis);
        let mut data = vec![0.0; out_shape.iter().product()];
        for o in 0..outer {
            let mut dst_j = 0usize;
            for &x in xs {
                let v = self.value(x);
                let len = v.shape()[axis];
                let src = &v.data()[o * len * inner..(o + 1) * len * inner];
                let dst_base = (o * total + dst_j) * inner;
                data[dst_base..dst_base + len * inner].copy_from_slice(src);
                dst_j += len;
            }
        }
        let t = Tensor::new(out_shape, data)?;
        self.push(t, Op::Concat { xs: xs.to_vec(), axis }, "concat")
    }

    pub fn slice(&mut self, x: TensorRef, axis: usize, start: usize, len: usize) -> Result<TensorRef> {
        let v = self.value(x);
        if axis >= v.rank() || start + len > v.shape()[axis] || len == 0 {
            return Err(Error::invalid(format!(
                "slice axis {axis} range {start}..{} out of bounds for {:?}",
                start + len,
                v.shape()
            )));
        }
        let (outer, alen, inner) = kernels::lanes(v.shape(), axis);
        let mut out_shape = v.shape().to_vec();
        out_shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = (o * alen + start) * inner;
            let dst = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&v.data()[src..src + len * inner]);
        }
        let t = Tensor::new(out_shape, data)?;
        self.push(t, Op::Slice { x, axis, start, len }, "slice")
    }

    /// 2-D cross-correlation: input `[H, W, Cin]`, kernel `[KH, KW, Cin, Cout]`.
    pub fn conv2d(
        &mut self,
        x: TensorRef,
        k: TensorRef,
        stride: usize,
        dilation: usize,
        padding: Padding,
    ) -> Result<TensorRef> {
        let geom = ConvGeom::resolve(
            self.value(x).shape(),
            self.value(k).shape(),
            stride,
            dilation,
            padding,
        )?;
        let data = kernels::conv2d(self.value(x).data(), self.value(k).data(), &geom);
        let t = Tensor::new(geom.out_shape(), data)?;
        let meta = ConvMeta { stride, dilation, padding };
        self.push(t, Op::Conv2d { x, k, meta }, "conv2d")
    }

    fn conv_grad_input(
        &mut self,
        gout: TensorRef,
        k: TensorRef,
        meta: ConvMeta,
        in_shape: Vec<usize>,
    ) -> Result<TensorRef> {
        let geom =
            ConvGeom::resolve(&in_shape, self.value(k).shape(), meta.stride, meta.dilation, meta.padding)?;
        shape::require_equal(self.value(gout).shape(), &geom.out_shape(), "conv_grad_input")?;
        let data = kernels::conv2d_grad_input(self.value(gout).data(), self.value(k).data(), &geom);
        let t = Tensor::new(in_shape.clone(), data)?;
        self.push(t, Op::ConvGradInput { gout, k, meta }, "conv_grad_input")
    }

    fn conv_grad_kernel(
        &mut self,
        x: TensorRef,
        gout: TensorRef,
        meta: ConvMeta,
        k_shape: Vec<usize>,
    ) -> Result<TensorRef> {
        let geom =
            ConvGeom::resolve(self.value(x).shape(), &k_shape, meta.stride, meta.dilation, meta.padding)?;
        shape::require_equal(self.value(gout).shape(), &geom.out_shape(), "conv_grad_kernel")?;
        let data = kernels::conv2d_grad_kernel(self.value(x).data(), self.value(gout).data(), &geom);
        let t = Tensor::new(k_shape.clone(), data)?;
        self.push(t, Op::ConvGradKernel { x, gout, meta }, "conv_grad_kernel")
    }

    /// Resamples `[H, W, C]` to `[oh, ow, C]`.
    pub fn upsample(
        &mut self,
        x: TensorRef,
        oh: usize,
        ow: usize,
        mode: UpsampleMode,
    ) -> Result<TensorRef> {
        let v = self.value(x);
        if v.rank() != 3 {
            return Err(Error::shape(format!("upsample expects [H, W, C], got {:?}", v.shape())));
        }
        if oh == 0 || ow == 0 {
            return Err(Error::invalid("upsample target extent must be >= 1".to_string()));
        }
        let (h, w, c) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let data = match mode {
            UpsampleMode::Bilinear => kernels::upsample_bilinear(v.data(), h, w, c, oh, ow),
            UpsampleMode::Nearest => kernels::upsample_nearest(v.data(), h, w, c, oh, ow),
        };
        let t = Tensor::new(vec![oh, ow, c], data)?;
        self.push(t, Op::Upsample { x, mode }, "upsample")
    }

    fn upsample_adjoint(
        &mut self,
        gout: TensorRef,
        mode: UpsampleMode,
        in_hw: (usize, usize),
    ) -> Result<TensorRef> {
        let v = self.value(gout);
        let (oh, ow, c) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let (h, w) = in_hw;
        let data = match mode {
            UpsampleMode::Bilinear => kernels::upsample_bilinear_adjoint(v.data(), h, w, c, oh, ow),
            UpsampleMode::Nearest => kernels::upsample_nearest_adjoint(v.data(), h, w, c, oh, ow),
        };
        let t = Tensor::new(vec![h, w, c], data)?;
        self.push(t, Op::UpsampleAdjoint { gout, mode }, "upsample_adjoint")
    }

    // ----------------------------------------------------------- backward --

    /// Emits the vector-Jacobian product of one node: for each differentiable
    /// input, a node computing its cotangent contribution given cotangent `g`.
    fn vjp(&mut self, idx: usize, g: TensorRef) -> Result<Vec<(TensorRef, TensorRef)>> {
        let op = self.nodes[idx].op.clone();
        let out = TensorRef(idx);
        let mut contributions = Vec::new();
        let mut push = |this: &mut Self, input: TensorRef, c: TensorRef| {
            if this.nodes[input.0].requires_grad {
                contributions.push((input, c));
            }
            Ok::<(), Error>(())
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                push(self, a, g)?;
                push(self, b, g)?;
            }
            Op::Sub(a, b) => {
                push(self, a, g)?;
                let nb = self.neg(g)?;
                push(self, b, nb)?;
            }
            Op::Mul(a, b) => {
                let da = self.mul(g, b)?;
                push(self, a, da)?;
                let db = self.mul(g, a)?;
                push(self, b, db)?;
            }
            Op::Div(a, b) => {
                let da = self.div(g, b)?;
                push(self, a, da)?;
                // d/db (a/b) = -a / b^2
                let bb = self.mul(b, b)?;
                let q = self.div(a, bb)?;
                let gq = self.mul(g, q)?;
                let db = self.neg(gq)?;
                push(self, b, db)?;
            }
            Op::Scale(a, c) => {
                let da = self.scale(g, c)?;
                push(self, a, da)?;
            }
            Op::AddScalar(a) => {
                push(self, a, g)?;
            }
            Op::Log(a) => {
                let da = self.div(g, a)?;
                push(self, a, da)?;
            }
            Op::Exp(a) => {
                let da = self.mul(g, out)?;
                push(self, a, da)?;
            }
            Op::Sqrt(a) => {
                let q = self.div(g, out)?;
                let da = self.scale(q, 0.5)?;
                push(self, a, da)?;
            }
            Op::Sigmoid(a) => {
                // y * (1 - y)
                let ny = self.scale(out, -1.0)?;
                let one_m = self.add_scalar(ny, 1.0)?;
                let s = self.mul(out, one_m)?;
                let da = self.mul(g, s)?;
                push(self, a, da)?;
            }
            Op::Abs(a) => {
                // Subgradient: sign(x), with sign(0) = 0.
                let sign = Tensor::new(
                    self.value(a).shape().to_vec(),
                    self.value(a).data().iter().map(|&v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }).collect(),
                )?;
                let sc = self.constant(sign);
                let da = self.mul(g, sc)?;
                push(self, a, da)?;
            }
            Op::LeakyRelu(a, slope) => {
                let mask = Tensor::new(
                    self.value(a).shape().to_vec(),
                    self.value(a).data().iter().map(|&v| if v > 0.0 { 1.0 } else { slope }).collect(),
                )?;
                let mc = self.constant(mask);
                let da = self.mul(g, mc)?;
                push(self, a, da)?;
            }
            Op::ClampMin(a, min) => {
                let mask = Tensor::new(
                    self.value(a).shape().to_vec(),
                    self.value(a).data().iter().map(|&v| if v > min { 1.0 } else { 0.0 }).collect(),
                )?;
                let mc = self.constant(mask);
                let da = self.mul(g, mc)?;
                push(self, a, da)?;
            }
            Op::Matmul(a, b) => {
                let bt = self.transpose2d(b)?;
                let da = self.matmul(g, bt)?;
                push(self, a, da)?;
                let at = self.transpose2d(a)?;
                let db = self.matmul(at, g)?;
                push(self, b, db)?;
            }
            Op::Transpose2d(a) => {
                let da = self.transpose2d(g)?;
                push(self, a, da)?;
            }
            Op::Reshape(a) => {
                let target = self.value(a).shape().to_vec();
                let da = self.reshape(g, &target)?;
                push(self, a, da)?;
            }
            Op::Softmax(a, axis) => {
                // dx = (g - sum(g * y, axis)) * y
                let gy = self.mul(g, out)?;
                let s = self.sum_axis(gy, axis, true)?;
                let full = self.value(out).shape().to_vec();
                let sb = self.broadcast_to(s, &full)?;
                let centered = self.sub(g, sb)?;
                let da = self.mul(centered, out)?;
                push(self, a, da)?;
            }
            Op::SumAll(a) => {
                let rank = self.value(a).rank();
                let ones_shape = vec![1usize; rank];
                let gr = self.reshape(g, &ones_shape)?;
                let target = self.value(a).shape().to_vec();
                let da = self.broadcast_to(gr, &target)?;
                push(self, a, da)?;
            }
            Op::SumAxis { x, axis, keepdims } => {
                let mut keep_shape = self.value(x).shape().to_vec();
                keep_shape[axis] = 1;
                let gk = if keepdims { g } else { self.reshape(g, &keep_shape)? };
                let target = self.value(x).shape().to_vec();
                let da = self.broadcast_to(gk, &target)?;
                push(self, x, da)?;
            }
            Op::BroadcastTo(a) => {
                // Reduce over every axis the broadcast expanded, then restore rank.
                let from = self.value(a).shape().to_vec();
                let to = self.value(out).shape().to_vec();
                let offset = to.len() - from.len();
                let mut cur = g;
                for lead in 0..offset {
                    let _ = lead;
                    cur = self.sum_axis(cur, 0, false)?;
                }
                for (axis, &f) in from.iter().enumerate() {
                    if f == 1 && self.value(cur).shape()[axis] != 1 {
                        cur = self.sum_axis(cur, axis, true)?;
                    }
                }
                let da = self.reshape(cur, &from)?;
                push(self, a, da)?;
            }
            Op::Concat { xs, axis } => {
                let mut start = 0usize;
                for x in xs {
                    let len = self.value(x).shape()[axis];
                    let piece = self.slice(g, axis, start, len)?;
                    push(self, x, piece)?;
                    start += len;
                }
            }
            Op::Slice { x, axis, start, len } => {
                // Embed the cotangent back into a zero tensor of the input shape.
                let in_shape = self.value(x).shape().to_vec();
                let total = in_shape[axis];
                let mut parts = Vec::new();
                if start > 0 {
                    let mut s = in_shape.clone();
                    s[axis] = start;
                    parts.push(self.constant(Tensor::zeros(&s)));
                }
                parts.push(g);
                if start + len < total {
                    let mut s = in_shape.clone();
                    s[axis] = total - start - len;
                    parts.push(self.constant(Tensor::zeros(&s)));
                }
                let da = self.concat(&parts, axis)?;
                push(self, x, da)?;
            }
            Op::Conv2d { x, k, meta } => {
                let in_shape = self.value(x).shape().to_vec();
                let k_shape = self.value(k).shape().to_vec();
                let dx = self.conv_grad_input(g, k, meta, in_shape)?;
                push(self, x, dx)?;
                let dk = self.conv_grad_kernel(x, g, meta, k_shape)?;
                push(self, k, dk)?;
            }
            Op::ConvGradInput { gout, k, meta, .. } => {
                // d<c, A_k^T gout> / dgout = A_k c ; / dk = grad_kernel(c, gout)
                let k_shape = self.value(k).shape().to_vec();
                let dgout = self.conv2d(g, k, meta.stride, meta.dilation, meta.padding)?;
                push(self, gout, dgout)?;
                let dk = self.conv_grad_kernel(g, gout, meta, k_shape)?;
                push(self, k, dk)?;
            }
            Op::ConvGradKernel { x, gout, meta, .. } => {
                // d<c, grad_kernel(x, gout)> / dx = grad_input(gout, c) ; / dgout = conv(x, c)
                let in_shape = self.value(x).shape().to_vec();
                let dx = self.conv_grad_input(gout, g, meta, in_shape)?;
                push(self, x, dx)?;
                let dgout = self.conv2d(x, g, meta.stride, meta.dilation, meta.padding)?;
                push(self, gout, dgout)?;
            }
            Op::Upsample { x, mode } => {
                let s = self.value(x).shape().to_vec();
                let da = self.upsample_adjoint(g, mode, (s[0], s[1]))?;
                push(self, x, da)?;
            }
            Op::UpsampleAdjoint { gout, mode, .. } => {
                let s = self.value(gout).shape().to_vec();
                let da = self.upsample(g, s[0], s[1], mode)?;
                push(self, gout, da)?;
            }
        }
        Ok(contributions)
    }

    /// Builds cotangent nodes for `output` with respect to every
    /// requires-grad ancestor; returns the map from node index to cotangent.
    fn build_cotangents(&mut self, output: TensorRef) -> Result<HashMap<usize, TensorRef>> {
        if self.value(output).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar (one-element) output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        // Reachability: ancestors of `output` that carry gradient.
        let mut relevant = vec![false; self.nodes.len()];
        let mut stack = vec![output.0];
        while let Some(i) = stack.pop() {
            if relevant[i] || !self.nodes[i].requires_grad {
                continue;
            }
            relevant[i] = true;
            for r in self.op_inputs(&self.nodes[i].op.clone()) {
                stack.push(r.0);
            }
        }
        let mut cot: HashMap<usize, TensorRef> = HashMap::new();
        let seed_shape = self.value(output).shape().to_vec();
        let seed = self.constant(Tensor::ones(&seed_shape));
        cot.insert(output.0, seed);
        // Tape order is topological, so one descending sweep finalizes each
        // node's cotangent before its VJP fans out to inputs.
        for i in (0..=output.0).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(&g) = cot.get(&i) else { continue };
            for (input, contribution) in self.vjp(i, g)? {
                match cot.get(&input.0) {
                    Some(&existing) => {
                        let merged = self.add(existing, contribution)?;
                        cot.insert(input.0, merged);
                    }
                    None => {
                        cot.insert(input.0, contribution);
                    }
                }
            }
        }
        Ok(cot)
    }

    /// Reverse pass from a scalar `loss`: accumulates gradients into every
    /// requires-grad leaf. Repeated calls accumulate (no implicit zeroing), so
    /// two passes over the same loss exactly double each gradient.
    pub fn backward(&mut self, loss: TensorRef) -> Result<()> {
        let cot = self.build_cotangents(loss)?;
        for (idx, gref) in cot {
            let is_leaf = matches!(self.nodes[idx].op, Op::Leaf);
            if !is_leaf || !self.nodes[idx].requires_grad {
                continue;
            }
            let gval = self.nodes[gref.0].value.clone();
            match &mut self.nodes[idx].grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(gval.data()) {
                        *a += b;
                    }
                }
                None => self.nodes[idx].grad = Some(gval),
            }
        }
        Ok(())
    }

    /// Gradient of scalar `output` with respect to each of `wrt`, returned as
    /// graph nodes (so the results can be composed and differentiated again).
    /// Entries are `None` for nodes the output does not depend on.
    pub fn grad_refs(
        &mut self,
        output: TensorRef,
        wrt: &[TensorRef],
    ) -> Result<Vec<Option<TensorRef>>> {
        // The reverse sweep normally prunes constant subgraphs, which would
        // drop cotangents for constant targets (e.g. a detached critic
        // input). Temporarily mark the targets' forward closure as
        // gradient-carrying so contributions reach them, then restore.
        let limit = output.0;
        let mut descendant = vec![false; limit + 1];
        for r in wrt {
            if r.0 <= limit {
                descendant[r.0] = true;
            }
        }
        let mut flipped: Vec<usize> = Vec::new();
        for i in 0..=limit {
            if !descendant[i] {
                let op = self.nodes[i].op.clone();
                if self.op_inputs(&op).iter().any(|t| descendant[t.0]) {
                    descendant[i] = true;
                }
            }
            if descendant[i] && !self.nodes[i].requires_grad {
                self.nodes[i].requires_grad = true;
                flipped.push(i);
            }
        }
        let cot = self.build_cotangents(output);
        for i in flipped {
            self.nodes[i].requires_grad = false;
        }
        let cot = cot?;
        Ok(wrt.iter().map(|r| cot.get(&r.0).copied()).collect())
    }
}
