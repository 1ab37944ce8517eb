//! Forward ops on [`Var`] and their backward rules.
//!
//! Shape conventions: 4-D tensors are `[N, C, H, W]`; "per-sample" reductions
//! treat axis 0 as the batch axis and everything after it as the sample.
//! Elementwise binary ops require identical shapes (no broadcasting); the
//! explicit expand ops cover every broadcast the model needs.

use super::kernels::{self, ConvGeom};
use super::{GradError, Tensor, Var};

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar,
    MatMul,
    Transpose,
    Conv2d { stride: usize, pad: usize },
    ConvInputGrad { stride: usize, pad: usize },
    ConvWeightGrad { stride: usize, pad: usize },
    Upsample2,
    SumPool2,
    Relu,
    ClampMin(f64),
    Sigmoid,
    Exp,
    LogSoftmax,
    Square,
    Sqrt,
    Abs,
    Div { guard: f64 },
    Reshape,
    Concat { axis: usize },
    Narrow { axis: usize, start: usize },
    Pad { axis: usize, start: usize },
    SpatialMean,
    SpatialExpand { h: usize, w: usize },
    SumAll,
    ExpandScalar,
    SumPerSample,
    ExpandPerSample,
    SumToChannel,
    BroadcastChannel,
    L2Norm,
    L2NormPerSample,
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvInputGrad { .. } => "conv2d_input_grad",
            Op::ConvWeightGrad { .. } => "conv2d_weight_grad",
            Op::Upsample2 => "upsample2",
            Op::SumPool2 => "sum_pool2",
            Op::Relu => "relu",
            Op::ClampMin(_) => "clamp_min",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::LogSoftmax => "log_softmax",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Abs => "abs",
            Op::Div { .. } => "div",
            Op::Reshape => "reshape",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Pad { .. } => "pad",
            Op::SpatialMean => "spatial_mean",
            Op::SpatialExpand { .. } => "spatial_expand",
            Op::SumAll => "sum",
            Op::ExpandScalar => "expand_scalar",
            Op::SumPerSample => "sum_per_sample",
            Op::ExpandPerSample => "expand_per_sample",
            Op::SumToChannel => "sum_to_channel",
            Op::BroadcastChannel => "broadcast_channel",
            Op::L2Norm => "l2_norm",
            Op::L2NormPerSample => "l2_norm_per_sample",
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), GradError> {
    if a.shape() != b.shape() {
        return Err(GradError::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    Ok(())
}

fn rank(op: &'static str, t: &Tensor, r: usize) -> Result<(), GradError> {
    if t.shape().len() != r {
        return Err(GradError::InvalidArgument {
            op,
            detail: format!("expected rank {r}, got shape {:?}", t.shape()),
        });
    }
    Ok(())
}

fn invalid(op: &'static str, detail: String) -> GradError {
    GradError::InvalidArgument { op, detail }
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn conv_geom(x: &[usize], w: &[usize], stride: usize, pad: usize) -> ConvGeom {
    ConvGeom { n: x[0], c_in: x[1], h: x[2], w: x[3], c_out: w[0], k: w[2], stride, pad }
}

impl<'g> Var<'g> {
    fn unary(self, op: Op, value: Tensor) -> Result<Var<'g>, GradError> {
        self.graph.push(op, &[self], value)
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>, GradError> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        self.graph.push(Op::Add, &[self, other], a.zip_map(&b, |x, y| x + y))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>, GradError> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        self.graph.push(Op::Sub, &[self, other], a.zip_map(&b, |x, y| x - y))
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>, GradError> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        self.graph.push(Op::Mul, &[self, other], a.zip_map(&b, |x, y| x * y))
    }

    pub fn scale(self, c: f64) -> Result<Var<'g>, GradError> {
        let v = self.value().map(|x| x * c);
        self.unary(Op::Scale(c), v)
    }

    pub fn neg(self) -> Result<Var<'g>, GradError> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'g>, GradError> {
        let v = self.value().map(|x| x + c);
        self.unary(Op::AddScalar, v)
    }

    /// `(m×k)·(k×n)` product of two rank-2 tensors.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>, GradError> {
        let (a, b) = (self.value(), other.value());
        rank("matmul", &a, 2)?;
        rank("matmul", &b, 2)?;
        let (m, k, k2, n) = (a.shape()[0], a.shape()[1], b.shape()[0], b.shape()[1]);
        if k != k2 {
            return Err(GradError::ShapeMismatch { op: "matmul", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
        }
        let v = Tensor::new(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n))?;
        self.graph.push(Op::MatMul, &[self, other], v)
    }

    pub fn transpose(self) -> Result<Var<'g>, GradError> {
        let a = self.value();
        rank("transpose", &a, 2)?;
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let v = Tensor::new(vec![c, r], kernels::transpose(a.data(), r, c))?;
        self.unary(Op::Transpose, v)
    }

    /// Cross-correlation of `self [N,C,H,W]` with `weight [O,C,k,k]` (k odd),
    /// zero padding `pad`, output `[N,O,(H+2p-k)/s+1,(W+2p-k)/s+1]`.
    pub fn conv2d(self, weight: Var<'g>, stride: usize, pad: usize) -> Result<Var<'g>, GradError> {
        let (x, w) = (self.value(), weight.value());
        rank("conv2d", &x, 4)?;
        rank("conv2d", &w, 4)?;
        let (xs, ws) = (x.shape(), w.shape());
        if xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(GradError::ShapeMismatch { op: "conv2d", lhs: xs.to_vec(), rhs: ws.to_vec() });
        }
        if ws[2] % 2 == 0 {
            return Err(invalid("conv2d", format!("kernel extent {} must be odd", ws[2])));
        }
        if stride == 0 || xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[2] {
            return Err(invalid("conv2d", format!("stride {stride}, pad {pad} invalid for input {xs:?}")));
        }
        let g = conv_geom(xs, ws, stride, pad);
        let v = Tensor::new(vec![g.n, g.c_out, g.out_h(), g.out_w()], kernels::conv2d(x.data(), w.data(), &g))?;
        self.graph.push(Op::Conv2d { stride, pad }, &[self, weight], v)
    }

    /// Adjoint of [`Var::conv2d`] in its input: `self` is an output-shaped
    /// gradient `[N,O,oh,ow]`, the result has shape `[N,C,h,w]`.
    pub fn conv2d_input_grad(
        self,
        weight: Var<'g>,
        stride: usize,
        pad: usize,
        h: usize,
        w: usize,
    ) -> Result<Var<'g>, GradError> {
        let (gv, wv) = (self.value(), weight.value());
        rank("conv2d_input_grad", &gv, 4)?;
        rank("conv2d_input_grad", &wv, 4)?;
        let (gs, ws) = (gv.shape(), wv.shape());
        let geom = ConvGeom { n: gs[0], c_in: ws[1], h, w, c_out: ws[0], k: ws[2], stride, pad };
        if gs[1] != ws[0] || gs[2] != geom.out_h() || gs[3] != geom.out_w() {
            return Err(GradError::ShapeMismatch { op: "conv2d_input_grad", lhs: gs.to_vec(), rhs: ws.to_vec() });
        }
        let v = Tensor::new(vec![geom.n, geom.c_in, h, w], kernels::conv2d_input_grad(gv.data(), wv.data(), &geom))?;
        self.graph.push(Op::ConvInputGrad { stride, pad }, &[self, weight], v)
    }

    /// Adjoint of [`Var::conv2d`] in its weight: `self` is the conv input
    /// `[N,C,H,W]`, `grad` an output-shaped gradient; result `[O,C,k,k]`.
    pub fn conv2d_weight_grad(self, grad: Var<'g>, stride: usize, pad: usize, k: usize) -> Result<Var<'g>, GradError> {
        let (xv, gv) = (self.value(), grad.value());
        rank("conv2d_weight_grad", &xv, 4)?;
        rank("conv2d_weight_grad", &gv, 4)?;
        let (xs, gs) = (xv.shape(), gv.shape());
        let geom = ConvGeom { n: xs[0], c_in: xs[1], h: xs[2], w: xs[3], c_out: gs[1], k, stride, pad };
        if gs[0] != xs[0] || gs[2] != geom.out_h() || gs[3] != geom.out_w() {
            return Err(GradError::ShapeMismatch { op: "conv2d_weight_grad", lhs: xs.to_vec(), rhs: gs.to_vec() });
        }
        let v = Tensor::new(vec![gs[1], xs[1], k, k], kernels::conv2d_weight_grad(xv.data(), gv.data(), &geom))?;
        self.graph.push(Op::ConvWeightGrad { stride, pad }, &[self, grad], v)
    }

    /// Nearest-neighbour 2× upsampling of the last two axes of a 4-D tensor.
    pub fn upsample2(self) -> Result<Var<'g>, GradError> {
        let x = self.value();
        rank("upsample2", &x, 4)?;
        let s = x.shape();
        let v = Tensor::new(vec![s[0], s[1], 2 * s[2], 2 * s[3]], kernels::upsample2(x.data(), s[0] * s[1], s[2], s[3]))?;
        self.unary(Op::Upsample2, v)
    }

    /// Sums over non-overlapping 2×2 blocks of the last two axes.
    pub fn sum_pool2(self) -> Result<Var<'g>, GradError> {
        let x = self.value();
        rank("sum_pool2", &x, 4)?;
        let s = x.shape();
        if s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(invalid("sum_pool2", format!("spatial extents of {s:?} must be even")));
        }
        let v = Tensor::new(vec![s[0], s[1], s[2] / 2, s[3] / 2], kernels::sum_pool2(x.data(), s[0] * s[1], s[2], s[3]))?;
        self.unary(Op::SumPool2, v)
    }

    pub fn relu(self) -> Result<Var<'g>, GradError> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(Op::Relu, v)
    }

    /// Elementwise `max(self, floor)`.
    pub fn clamp_min(self, floor: f64) -> Result<Var<'g>, GradError> {
        let v = self.value().map(|x| x.max(floor));
        self.unary(Op::ClampMin(floor), v)
    }

    pub fn sigmoid(self) -> Result<Var<'g>, GradError> {
        let v = self.value().map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.unary(Op::Sigmoid, v)
    }

    pub fn exp(self) -> Result<Var<'g>, GradError> {
        let v = self.value().map(f64::exp);
        self.unary(Op::Exp, v)
    }

    /// Row-wise log-softmax of a rank-2 tensor.
    pub fn log_softmax(self) -> Result<Var<'g>, GradError> {
        let x = self.value();
        rank("log_softmax", &x, 2)?;
        let cols = x.shape()[1];
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let v = Tensor::new(x.shape().to_vec(), out)?;
        self.unary(Op::LogSoftmax, v)
    }

    pub fn square(self) -> Result<Var<'g>, GradError> {
        let v = self.value().map(|x| x * x);
        self.unary(Op::Square, v)
    }

    pub fn sqrt(self) -> Result<Var<'g>, GradError> {
        let x = self.value();
        if x.data().iter().any(|&v| v < 0.0) {
            return Err(GradError::NonFinite { op: "sqrt" });
        }
        let v = x.map(f64::sqrt);
        self.unary(Op::Sqrt, v)
    }

    pub fn abs(self) -> Result<Var<'g>, GradError> {
        let v = self.value().map(f64::abs);
        self.unary(Op::Abs, v)
    }

    /// Elementwise `self / (denom + guard)`; the guard is the caller's choice.
    pub fn div(self, denom: Var<'g>, guard: f64) -> Result<Var<'g>, GradError> {
        let (a, b) = (self.value(), denom.value());
        same_shape("div", &a, &b)?;
        self.graph.push(Op::Div { guard }, &[self, denom], a.zip_map(&b, |x, y| x / (y + guard)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>, GradError> {
        let v = (*self.value()).clone().reshaped(shape)?;
        self.unary(Op::Reshape, v)
    }

    /// Flattens everything after the batch axis.
    pub fn flatten(self) -> Result<Var<'g>, GradError> {
        let s = self.shape();
        let rest: usize = s[1..].iter().product();
        self.reshape(&[s[0], rest])
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>, GradError> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs".into()))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(GradError::ShapeMismatch { op: "concat", lhs: base.clone(), rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let d = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * d..(o + 1) * d]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        first.graph.push(Op::Concat { axis }, parts, Tensor::new(shape, data)?)
    }

    /// Slice `[start, start+len)` of `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>, GradError> {
        let x = self.value();
        let s = x.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(invalid("narrow", format!("[{start}, {}) out of range on axis {axis} of {s:?}", start + len)));
        }
        let (outer, extent, inner) = split_axis(s, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        self.unary(Op::Narrow { axis, start }, Tensor::new(shape, data)?)
    }

    /// Zero-pads `axis` to extent `total`, placing `self` at offset `start`.
    /// Adjoint of [`Var::narrow`].
    pub fn pad_axis(self, axis: usize, start: usize, total: usize) -> Result<Var<'g>, GradError> {
        let x = self.value();
        let s = x.shape();
        if axis >= s.len() || start + s[axis] > total {
            return Err(invalid("pad", format!("cannot place {s:?} at {start} within extent {total}")));
        }
        let (outer, len, inner) = split_axis(s, axis);
        let mut data = vec![0.0; outer * total * inner];
        for o in 0..outer {
            let dst = o * total * inner + start * inner;
            data[dst..dst + len * inner].copy_from_slice(&x.data()[o * len * inner..(o + 1) * len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = total;
        self.unary(Op::Pad { axis, start }, Tensor::new(shape, data)?)
    }

    /// Global average pool `[N,C,H,W] -> [N,C]`.
    pub fn spatial_mean(self) -> Result<Var<'g>, GradError> {
        let x = self.value();
        rank("spatial_mean", &x, 4)?;
        let s = x.shape();
        let hw = s[2] * s[3];
        let data = x.data().chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect();
        self.unary(Op::SpatialMean, Tensor::new(vec![s[0], s[1]], data)?)
    }

    /// `[N,C] -> [N,C,h,w]` by replication.
    pub fn spatial_expand(self, h: usize, w: usize) -> Result<Var<'g>, GradError> {
        let x = self.value();
        rank("spatial_expand", &x, 2)?;
        let s = x.shape();
        let data = x.data().iter().flat_map(|&v| std::iter::repeat(v).take(h * w)).collect();
        self.unary(Op::SpatialExpand { h, w }, Tensor::new(vec![s[0], s[1], h, w], data)?)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Result<Var<'g>, GradError> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(Op::SumAll, v)
    }

    pub fn mean(self) -> Result<Var<'g>, GradError> {
        let n = self.value().numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Replicates a single-element tensor to `shape`.
    pub fn expand_scalar(self, shape: &[usize]) -> Result<Var<'g>, GradError> {
        let x = self.value();
        if !x.is_scalar() {
            return Err(invalid("expand_scalar", format!("input {:?} is not a scalar", x.shape())));
        }
        self.unary(Op::ExpandScalar, Tensor::full(shape, x.item()))
    }

    /// `[B, ...] -> [B]`.
    pub fn sum_per_sample(self) -> Result<Var<'g>, GradError> {
        let x = self.value();
        let b = x.shape()[0];
        let per = x.numel() / b;
        let data = x.data().chunks(per).map(|c| c.iter().sum()).collect();
        self.unary(Op::SumPerSample, Tensor::new(vec![b], data)?)
    }

    pub fn mean_per_sample(self) -> Result<Var<'g>, GradError> {
        let s = self.shape();
        let per: usize = s[1..].iter().product();
        self.sum_per_sample()?.scale(1.0 / per as f64)
    }

    /// `[B] -> shape` (with `shape[0] == B`) by replicating each entry.
    pub fn expand_per_sample(self, shape: &[usize]) -> Result<Var<'g>, GradError> {
        let x = self.value();
        rank("expand_per_sample", &x, 1)?;
        if shape.first() != Some(&x.shape()[0]) {
            return Err(GradError::ShapeMismatch { op: "expand_per_sample", lhs: x.shape().to_vec(), rhs: shape.to_vec() });
        }
        let per: usize = shape[1..].iter().product();
        let data = x.data().iter().flat_map(|&v| std::iter::repeat(v).take(per)).collect();
        self.unary(Op::ExpandPerSample, Tensor::new(shape.to_vec(), data)?)
    }

    /// `[N,C,...] -> [C]`, summing over every axis except 1.
    pub fn sum_to_channel(self) -> Result<Var<'g>, GradError> {
        let x = self.value();
        let s = x.shape();
        if s.len() < 2 {
            return Err(invalid("sum_to_channel", format!("need rank >= 2, got {s:?}")));
        }
        let (outer, c, inner) = split_axis(s, 1);
        let mut data = vec![0.0; c];
        for o in 0..outer {
            for (ch, acc) in data.iter_mut().enumerate() {
                let base = (o * c + ch) * inner;
                *acc += x.data()[base..base + inner].iter().sum::<f64>();
            }
        }
        self.unary(Op::SumToChannel, Tensor::new(vec![c], data)?)
    }

    /// `[C] -> shape` with `shape[1] == C` (bias broadcast).
    pub fn broadcast_channel(self, shape: &[usize]) -> Result<Var<'g>, GradError> {
        let x = self.value();
        rank("broadcast_channel", &x, 1)?;
        if shape.len() < 2 || shape[1] != x.shape()[0] {
            return Err(GradError::ShapeMismatch { op: "broadcast_channel", lhs: x.shape().to_vec(), rhs: shape.to_vec() });
        }
        let (outer, c, inner) = split_axis(shape, 1);
        let mut data = Vec::with_capacity(outer * c * inner);
        for _ in 0..outer {
            for &v in x.data() {
                data.extend(std::iter::repeat(v).take(inner));
            }
        }
        self.unary(Op::BroadcastChannel, Tensor::new(shape.to_vec(), data)?)
    }

    /// Global Euclidean norm, shape `[1]`.
    pub fn l2_norm(self) -> Result<Var<'g>, GradError> {
        let v = Tensor::scalar(self.value().norm());
        self.unary(Op::L2Norm, v)
    }

    /// Euclidean norm of each sample, `[B, ...] -> [B]`.
    pub fn l2_norm_per_sample(self) -> Result<Var<'g>, GradError> {
        let x = self.value();
        let b = x.shape()[0];
        let per = x.numel() / b;
        let data = x.data().chunks(per).map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        self.unary(Op::L2NormPerSample, Tensor::new(vec![b], data)?)
    }
}

/// Gradient contributions of one node to each of its inputs. Entries for
/// inputs with `needed[i] == false` may be `None`.
pub(super) fn backward<'g>(
    op: &Op,
    inputs: &[Var<'g>],
    out: Var<'g>,
    gy: Var<'g>,
    needed: &[bool],
) -> Result<Vec<Option<Var<'g>>>, GradError> {
    let graph = gy.graph;
    let want = |i: usize| needed.get(i).copied().unwrap_or(false);
    let one = |v: Var<'g>| Ok(vec![Some(v)]);
    match op {
        Op::Leaf => Ok(vec![]),
        Op::Add => Ok(vec![Some(gy), Some(gy)]),
        Op::Sub => Ok(vec![Some(gy), if want(1) { Some(gy.neg()?) } else { None }]),
        Op::Mul => {
            let a = if want(0) { Some(gy.mul(inputs[1])?) } else { None };
            let b = if want(1) { Some(gy.mul(inputs[0])?) } else { None };
            Ok(vec![a, b])
        }
        Op::Scale(c) => one(gy.scale(*c)?),
        Op::AddScalar => one(gy),
        Op::MatMul => {
            let a = if want(0) { Some(gy.matmul(inputs[1].transpose()?)?) } else { None };
            let b = if want(1) { Some(inputs[0].transpose()?.matmul(gy)?) } else { None };
            Ok(vec![a, b])
        }
        Op::Transpose => one(gy.transpose()?),
        Op::Conv2d { stride, pad } => {
            let xs = inputs[0].shape();
            let k = inputs[1].shape()[2];
            let x = if want(0) {
                Some(gy.conv2d_input_grad(inputs[1], *stride, *pad, xs[2], xs[3])?)
            } else {
                None
            };
            let w = if want(1) { Some(inputs[0].conv2d_weight_grad(gy, *stride, *pad, k)?) } else { None };
            Ok(vec![x, w])
        }
        Op::ConvInputGrad { stride, pad, .. } => {
            // out = A(g, w) with <U, A(g, w)> = <conv(U, w), g>.
            let k = inputs[1].shape()[2];
            let g = if want(0) { Some(gy.conv2d(inputs[1], *stride, *pad)?) } else { None };
            let w = if want(1) { Some(gy.conv2d_weight_grad(inputs[0], *stride, *pad, k)?) } else { None };
            Ok(vec![g, w])
        }
        Op::ConvWeightGrad { stride, pad, .. } => {
            // out = B(x, g) with <V, B(x, g)> = <conv(x, V), g>.
            let xs = inputs[0].shape();
            let x = if want(0) {
                Some(inputs[1].conv2d_input_grad(gy, *stride, *pad, xs[2], xs[3])?)
            } else {
                None
            };
            let g = if want(1) { Some(inputs[0].conv2d(gy, *stride, *pad)?) } else { None };
            Ok(vec![x, g])
        }
        Op::Upsample2 => one(gy.sum_pool2()?),
        Op::SumPool2 => one(gy.upsample2()?),
        Op::Relu => {
            let mask = inputs[0].value().map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            one(gy.mul(graph.constant(mask))?)
        }
        Op::ClampMin(floor) => {
            let mask = inputs[0].value().map(|v| if v > *floor { 1.0 } else { 0.0 });
            one(gy.mul(graph.constant(mask))?)
        }
        Op::Sigmoid => {
            // σ' = σ(1 − σ), expressed through the output node.
            let slope = out.mul(out.neg()?.add_scalar(1.0)?)?;
            one(gy.mul(slope)?)
        }
        Op::Exp => one(gy.mul(out)?),
        Op::LogSoftmax => {
            let shape = out.shape();
            let row_sums = gy.sum_per_sample()?.expand_per_sample(&shape)?;
            one(gy.sub(out.exp()?.mul(row_sums)?)?)
        }
        Op::Square => one(gy.mul(inputs[0].scale(2.0)?)?),
        Op::Sqrt => one(gy.scale(0.5)?.div(out, 0.0)?),
        Op::Abs => {
            let sign = inputs[0].value().map(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 });
            one(gy.mul(graph.constant(sign))?)
        }
        Op::Div { guard } => {
            let a = if want(0) { Some(gy.div(inputs[1], *guard)?) } else { None };
            let b = if want(1) { Some(gy.mul(out)?.div(inputs[1], *guard)?.neg()?) } else { None };
            Ok(vec![a, b])
        }
        Op::Reshape => one(gy.reshape(&inputs[0].shape())?),
        Op::Concat { axis } => {
            let mut start = 0;
            let mut grads = Vec::with_capacity(inputs.len());
            for (i, x) in inputs.iter().enumerate() {
                let len = x.shape()[*axis];
                grads.push(if want(i) { Some(gy.narrow(*axis, start, len)?) } else { None });
                start += len;
            }
            Ok(grads)
        }
        Op::Narrow { axis, start } => {
            let total = inputs[0].shape()[*axis];
            one(gy.pad_axis(*axis, *start, total)?)
        }
        Op::Pad { axis, start, .. } => {
            let len = inputs[0].shape()[*axis];
            one(gy.narrow(*axis, *start, len)?)
        }
        Op::SpatialMean => {
            let s = inputs[0].shape();
            one(gy.spatial_expand(s[2], s[3])?.scale(1.0 / (s[2] * s[3]) as f64)?)
        }
        Op::SpatialExpand { h, w } => one(gy.spatial_mean()?.scale((h * w) as f64)?),
        Op::SumAll => one(gy.expand_scalar(&inputs[0].shape())?),
        Op::ExpandScalar => one(gy.sum()?.reshape(&inputs[0].shape())?),
        Op::SumPerSample => one(gy.expand_per_sample(&inputs[0].shape())?),
        Op::ExpandPerSample => one(gy.sum_per_sample()?),
        Op::SumToChannel => one(gy.broadcast_channel(&inputs[0].shape())?),
        Op::BroadcastChannel => one(gy.sum_to_channel()?),
        Op::L2Norm => {
            // d‖x‖/dx = x/‖x‖; at ‖x‖ = 0 the subgradient 0 is used (x is 0 there).
            let n = out.value().item();
            let shape = inputs[0].shape();
            if n == 0.0 {
                return one(graph.constant(Tensor::zeros(&shape)));
            }
            one(inputs[0].mul(gy.div(out, 0.0)?.expand_scalar(&shape)?)?)
        }
        Op::L2NormPerSample => {
            let shape = inputs[0].shape();
            let zero_guard = out.value().map(|v| if v == 0.0 { 1.0 } else { 0.0 });
            let denom = out.add(graph.constant(zero_guard))?;
            one(inputs[0].mul(gy.div(denom, 0.0)?.expand_per_sample(&shape)?)?)
        }
    }
}
