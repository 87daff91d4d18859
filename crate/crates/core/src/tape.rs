//! Reverse-mode differentiation over [`NdArray`] values.
//!
//! Operations are recorded on a Wengert list: every node's parents precede it,
//! so reverse insertion order is a reverse topological order and backward
//! visits each node exactly once. Gradients accumulate across `backward`
//! calls until [`Tape::zero_grad`].

use std::cell::{Ref, RefCell};

use crate::array::{bilinear_taps, NdArray};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId, S),
    MulScalar(NodeId, S),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Silu(NodeId),
    /// |x|^gamma with derivative gamma*|x|^(gamma-1)*sign(x), 0 at x = 0.
    AbsPow(NodeId, f64),
    Clamp(NodeId, f64, f64),
    /// Affine map over the trailing axis: y = x W^T + b.
    Linear { x: NodeId, w: NodeId, b: NodeId },
    /// Per-pixel affine map over the leading channel axis of [C, h, w].
    PointwiseLinear { x: NodeId, w: NodeId, b: NodeId },
    /// 3x3 convolution, zero padding 1, stride 1 or 2.
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize },
    /// Bilinear resampling of [C, h, w] to [C, out_h, out_w].
    Resample(NodeId),
    /// Softmax over axis 0 of [N, ...].
    ChannelSoftmax(NodeId),
    /// Log-softmax over axis 0 of [N, ...].
    ChannelLogSoftmax(NodeId),
    /// Cumulative sum along axis 0 of [N, ...].
    ChannelCumsum(NodeId),
    /// Sum over axis 0: [N, rest...] -> [rest...].
    ChannelSum(NodeId),
    SumAll(NodeId),
    /// Concatenation along axis 0.
    Concat0(NodeId, NodeId),
    /// [rest...] -> [n, rest...] by repetition.
    Broadcast0(NodeId, usize),
    /// [N, rest...] x [N, rest...] -> [2N, rest...], slices alternating a0 b0 a1 b1 ...
    Interleave0(NodeId, NodeId),
    /// Select index k along axis 0: [n, rest...] -> [rest...].
    Index0(NodeId, usize),
    /// Contiguous slice along axis 0: [n, rest...] -> [len, rest...].
    Slice0 { x: NodeId, start: usize, len: usize },
    /// [C, h, w] -> [C] by spatial averaging.
    SpatialMean(NodeId),
    /// One element of a rank-1 array -> [1].
    Pick(NodeId, usize),
    /// Array times a [1]-shaped scalar node.
    ScalarMul { a: NodeId, s: NodeId },
    /// q: [h, w] -> [N, h, w]; logits_k = log_coeff[k] + k ln q + (n-k) ln(1-q).
    BinomialLogits { q: NodeId, log_coeff: Vec<f64> },
}

struct Node<S: Scalar> {
    value: NdArray<S>,
    grad: Option<NdArray<S>>,
    op: Op<S>,
}

pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: NdArray<S>, op: Op<S>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, grad: None, op });
        NodeId(nodes.len() - 1)
    }

    pub fn leaf(&self, value: NdArray<S>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> Ref<'_, NdArray<S>> {
        Ref::map(self.nodes.borrow(), |n| &n[id.0].value)
    }

    pub fn value_clone(&self, id: NodeId) -> NdArray<S> {
        self.nodes.borrow()[id.0].value.clone()
    }

    /// Accumulated gradient; zeros until a backward pass reaches the node.
    pub fn grad(&self, id: NodeId) -> NdArray<S> {
        let nodes = self.nodes.borrow();
        match &nodes[id.0].grad {
            Some(g) => g.clone(),
            None => NdArray::zeros(nodes[id.0].value.shape().to_vec()),
        }
    }

    pub fn shape(&self, id: NodeId) -> Vec<usize> {
        self.nodes.borrow()[id.0].value.shape().to_vec()
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[a.0].value.shape() != nodes[b.0].value.shape() {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                nodes[a.0].value.shape(),
                nodes[b.0].value.shape()
            )));
        }
        Ok(())
    }

    fn zip_op(&self, a: NodeId, b: NodeId, op: Op<S>, f: impl Fn(S, S) -> S) -> NodeId {
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let data = va.data().iter().zip(vb.data().iter()).map(|(&x, &y)| f(x, y)).collect();
            NdArray::from_vec(va.shape().to_vec(), data).expect("zip preserves shape")
        };
        self.push(value, op)
    }

    fn map_op(&self, a: NodeId, op: Op<S>, f: impl Fn(S) -> S) -> NodeId {
        let value = self.nodes.borrow()[a.0].value.map(f);
        self.push(value, op)
    }

    pub fn add(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_op(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_op(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_op(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn div(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "div")?;
        Ok(self.zip_op(a, b, Op::Div(a, b), |x, y| x / y))
    }

    pub fn add_scalar(&self, a: NodeId, c: S) -> NodeId {
        self.map_op(a, Op::AddScalar(a, c), |x| x + c)
    }

    pub fn mul_scalar(&self, a: NodeId, c: S) -> NodeId {
        self.map_op(a, Op::MulScalar(a, c), |x| x * c)
    }

    pub fn exp(&self, a: NodeId) -> NodeId {
        self.map_op(a, Op::Exp(a), |x| x.exp())
    }

    pub fn ln(&self, a: NodeId) -> NodeId {
        self.map_op(a, Op::Ln(a), |x| x.ln())
    }

    pub fn sqrt(&self, a: NodeId) -> NodeId {
        self.map_op(a, Op::Sqrt(a), |x| x.sqrt())
    }

    pub fn sigmoid(&self, a: NodeId) -> NodeId {
        self.map_op(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&self, a: NodeId) -> NodeId {
        self.map_op(a, Op::Softplus(a), softplus)
    }

    pub fn silu(&self, a: NodeId) -> NodeId {
        self.map_op(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn abs_pow(&self, a: NodeId, gamma: f64) -> NodeId {
        let g = S::from_f64(gamma);
        self.map_op(a, Op::AbsPow(a, gamma), move |x| x.abs().powf(g))
    }

    pub fn clamp(&self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let (l, h) = (S::from_f64(lo), S::from_f64(hi));
        self.map_op(a, Op::Clamp(a, lo, hi), move |x| x.maximum(l).minimum(h))
    }

    /// y = x W^T + b over the trailing axis of x.
    pub fn linear(&self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let value = {
            let nodes = self.nodes.borrow();
            let (vx, vw, vb) = (&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value);
            let (out_dim, in_dim) = linear_dims(vw, vb)?;
            let &x_in = vx.shape().last().ok_or_else(|| {
                Error::Dimension("linear: input must have at least one axis".into())
            })?;
            if x_in != in_dim {
                return Err(Error::Dimension(format!(
                    "linear: input trailing extent {x_in} != layer input {in_dim}"
                )));
            }
            let rows = vx.len() / in_dim;
            let mut out = vec![S::ZERO; rows * out_dim];
            let (xd, wd, bd) = (vx.data(), vw.data(), vb.data());
            for r in 0..rows {
                let xr = &xd[r * in_dim..(r + 1) * in_dim];
                let yr = &mut out[r * out_dim..(r + 1) * out_dim];
                for o in 0..out_dim {
                    let wrow = &wd[o * in_dim..(o + 1) * in_dim];
                    let mut acc = bd[o];
                    for i in 0..in_dim {
                        acc = acc + xr[i] * wrow[i];
                    }
                    yr[o] = acc;
                }
            }
            let mut shape = vx.shape().to_vec();
            *shape.last_mut().unwrap() = out_dim;
            NdArray::from_vec(shape, out).expect("linear output shape")
        };
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    /// Per-pixel affine over the channel axis of [C, h, w] (a 1x1 convolution).
    pub fn pointwise_linear(&self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let value = {
            let nodes = self.nodes.borrow();
            let (vx, vw, vb) = (&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value);
            let (out_ch, in_ch) = linear_dims(vw, vb)?;
            if vx.shape().len() != 3 || vx.shape()[0] != in_ch {
                return Err(Error::Dimension(format!(
                    "pointwise_linear: input {:?} incompatible with layer [{out_ch}x{in_ch}]",
                    vx.shape()
                )));
            }
            let (h, w_) = (vx.shape()[1], vx.shape()[2]);
            let pixels = h * w_;
            let mut out = vec![S::ZERO; out_ch * pixels];
            let (xd, wd, bd) = (vx.data(), vw.data(), vb.data());
            for o in 0..out_ch {
                let wrow = &wd[o * in_ch..(o + 1) * in_ch];
                let yo = &mut out[o * pixels..(o + 1) * pixels];
                yo.iter_mut().for_each(|v| *v = bd[o]);
                for i in 0..in_ch {
                    let xi = &xd[i * pixels..(i + 1) * pixels];
                    let wv = wrow[i];
                    for p in 0..pixels {
                        yo[p] = yo[p] + xi[p] * wv;
                    }
                }
            }
            NdArray::from_vec(vec![out_ch, h, w_], out).expect("pointwise output shape")
        };
        Ok(self.push(value, Op::PointwiseLinear { x, w, b }))
    }

    /// 3x3 convolution with zero padding 1 and stride 1 or 2.
    pub fn conv2d(&self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        if stride != 1 && stride != 2 {
            return Err(Error::Contract(format!("conv2d: stride {stride} not in {{1,2}}")));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let (vx, vw, vb) = (&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value);
            let ws = vw.shape();
            if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
                return Err(Error::Dimension(format!("conv2d: weight {ws:?} must be [O,C,3,3]")));
            }
            let (out_ch, in_ch) = (ws[0], ws[1]);
            if vb.shape() != [out_ch] {
                return Err(Error::Dimension("conv2d: bias/weight mismatch".into()));
            }
            let xs = vx.shape();
            if xs.len() != 3 || xs[0] != in_ch {
                return Err(Error::Dimension(format!(
                    "conv2d: input {xs:?} incompatible with weight {ws:?}"
                )));
            }
            let (in_h, in_w) = (xs[1], xs[2]);
            let (out_h, out_w) = ((in_h - 1) / stride + 1, (in_w - 1) / stride + 1);
            let mut out = vec![S::ZERO; out_ch * out_h * out_w];
            let (xd, wd, bd) = (vx.data(), vw.data(), vb.data());
            for o in 0..out_ch {
                let yo = &mut out[o * out_h * out_w..(o + 1) * out_h * out_w];
                yo.iter_mut().for_each(|v| *v = bd[o]);
                for i in 0..in_ch {
                    let xi = &xd[i * in_h * in_w..(i + 1) * in_h * in_w];
                    let wk = &wd[(o * in_ch + i) * 9..(o * in_ch + i) * 9 + 9];
                    for oy in 0..out_h {
                        let iy0 = oy * stride;
                        let yrow = &mut yo[oy * out_w..(oy + 1) * out_w];
                        for (ky, wrow) in wk.chunks_exact(3).enumerate() {
                            let iy = iy0 + ky;
                            if iy == 0 || iy > in_h {
                                continue;
                            }
                            let xrow = &xi[(iy - 1) * in_w..iy * in_w];
                            conv_row_fwd(yrow, xrow, wrow, stride, in_w);
                        }
                    }
                }
            }
            NdArray::from_vec(vec![out_ch, out_h, out_w], out).expect("conv output shape")
        };
        Ok(self.push(value, Op::Conv2d { x, w, b, stride }))
    }

    /// Bilinear resampling of [C, h, w] (or [h, w]) to the given spatial extents.
    pub fn resample_bilinear(&self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let value = {
            let nodes = self.nodes.borrow();
            let vx = &nodes[x.0].value;
            let (ch, in_h, in_w, rank2) = spatial_shape(vx.shape())?;
            let data = crate::array::resample_bilinear(vx.data(), ch, in_h, in_w, out_h, out_w);
            let shape = if rank2 { vec![out_h, out_w] } else { vec![ch, out_h, out_w] };
            NdArray::from_vec(shape, data).expect("resample output shape")
        };
        Ok(self.push(value, Op::Resample(x)))
    }

    pub fn channel_softmax(&self, x: NodeId) -> Result<NodeId> {
        let value = {
            let nodes = self.nodes.borrow();
            let vx = &nodes[x.0].value;
            let (n, m) = leading_split(vx.shape())?;
            let mut out = vec![S::ZERO; vx.len()];
            let xd = vx.data();
            for col in 0..m {
                let mut mx = xd[col];
                for k in 1..n {
                    mx = mx.maximum(xd[k * m + col]);
                }
                let mut sum = S::ZERO;
                for k in 0..n {
                    let e = (xd[k * m + col] - mx).exp();
                    out[k * m + col] = e;
                    sum = sum + e;
                }
                for k in 0..n {
                    out[k * m + col] = out[k * m + col] / sum;
                }
            }
            NdArray::from_vec(vx.shape().to_vec(), out).expect("softmax shape")
        };
        Ok(self.push(value, Op::ChannelSoftmax(x)))
    }

    pub fn channel_log_softmax(&self, x: NodeId) -> Result<NodeId> {
        let value = {
            let nodes = self.nodes.borrow();
            let vx = &nodes[x.0].value;
            let (n, m) = leading_split(vx.shape())?;
            let mut out = vec![S::ZERO; vx.len()];
            let xd = vx.data();
            for col in 0..m {
                let mut mx = xd[col];
                for k in 1..n {
                    mx = mx.maximum(xd[k * m + col]);
                }
                let mut sum = S::ZERO;
                for k in 0..n {
                    sum = sum + (xd[k * m + col] - mx).exp();
                }
                let lse = mx + sum.ln();
                for k in 0..n {
                    out[k * m + col] = xd[k * m + col] - lse;
                }
            }
            NdArray::from_vec(vx.shape().to_vec(), out).expect("log-softmax shape")
        };
        Ok(self.push(value, Op::ChannelLogSoftmax(x)))
    }

    pub fn channel_cumsum(&self, x: NodeId) -> Result<NodeId> {
        let value = {
            let nodes = self.nodes.borrow();
            let vx = &nodes[x.0].value;
            let (n, m) = leading_split(vx.shape())?;
            let mut out = vec![S::ZERO; vx.len()];
            let xd = vx.data();
            for col in 0..m {
                let mut acc = S::ZERO;
                for k in 0..n {
                    acc = acc + xd[k * m + col];
                    out[k * m + col] = acc;
                }
            }
            NdArray::from_vec(vx.shape().to_vec(), out).expect("cumsum shape")
        };
        Ok(self.push(value, Op::ChannelCumsum(x)))
    }

    /// Sum over axis 0: [N, rest...] -> [rest...].
    pub fn channel_sum(&self, x: NodeId) -> Result<NodeId> {
        let value = {
            let nodes = self.nodes.borrow();
            let vx = &nodes[x.0].value;
            let (n, m) = leading_split(vx.shape())?;
            let mut out = vec![S::ZERO; m];
            let xd = vx.data();
            for k in 0..n {
                for col in 0..m {
                    out[col] = out[col] + xd[k * m + col];
                }
            }
            let rest = rest_shape(vx.shape());
            NdArray::from_vec(rest, out).expect("channel_sum shape")
        };
        Ok(self.push(value, Op::ChannelSum(x)))
    }

    pub fn sum_all(&self, x: NodeId) -> NodeId {
        let value = {
            let nodes = self.nodes.borrow();
            let mut acc = S::ZERO;
            for &v in nodes[x.0].value.data() {
                acc = acc + v;
            }
            NdArray::scalar(acc)
        };
        self.push(value, Op::SumAll(x))
    }

    pub fn mean_all(&self, x: NodeId) -> NodeId {
        let n = self.nodes.borrow()[x.0].value.len();
        let s = self.sum_all(x);
        self.mul_scalar(s, S::from_f64(1.0 / n as f64))
    }

    pub fn concat0(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            if va.shape().len() != vb.shape().len()
                || va.shape().is_empty()
                || va.shape()[1..] != vb.shape()[1..]
            {
                return Err(Error::Dimension(format!(
                    "concat0: shapes {:?} and {:?} differ beyond axis 0",
                    va.shape(),
                    vb.shape()
                )));
            }
            let mut shape = va.shape().to_vec();
            shape[0] += vb.shape()[0];
            let mut data = Vec::with_capacity(va.len() + vb.len());
            data.extend_from_slice(va.data());
            data.extend_from_slice(vb.data());
            NdArray::from_vec(shape, data).expect("concat shape")
        };
        Ok(self.push(value, Op::Concat0(a, b)))
    }

    /// Repeats [rest...] n times into [n, rest...].
    pub fn broadcast0(&self, x: NodeId, n: usize) -> NodeId {
        let value = {
            let nodes = self.nodes.borrow();
            let vx = &nodes[x.0].value;
            let mut shape = vec![n];
            shape.extend_from_slice(vx.shape());
            let mut data = Vec::with_capacity(n * vx.len());
            for _ in 0..n {
                data.extend_from_slice(vx.data());
            }
            NdArray::from_vec(shape, data).expect("broadcast shape")
        };
        self.push(value, Op::Broadcast0(x, n))
    }

    /// Interleaves equal-shaped arrays along axis 0: a0 b0 a1 b1 ...
    pub fn interleave0(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "interleave0")?;
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (n, m) = leading_split(va.shape())?;
            let mut shape = va.shape().to_vec();
            shape[0] = 2 * n;
            let mut data = Vec::with_capacity(2 * va.len());
            for k in 0..n {
                data.extend_from_slice(&va.data()[k * m..(k + 1) * m]);
                data.extend_from_slice(&vb.data()[k * m..(k + 1) * m]);
            }
            NdArray::from_vec(shape, data).expect("interleave shape")
        };
        Ok(self.push(value, Op::Interleave0(a, b)))
    }

    /// Selects slice k along axis 0: [n, rest...] -> [rest...].
    pub fn index0(&self, x: NodeId, k: usize) -> Result<NodeId> {
        let value = {
            let nodes = self.nodes.borrow();
            let vx = &nodes[x.0].value;
            let (n, m) = leading_split(vx.shape())?;
            if k >= n {
                return Err(Error::Dimension(format!("index0: {k} out of {n}")));
            }
            let rest = rest_shape(vx.shape());
            NdArray::from_vec(rest, vx.data()[k * m..(k + 1) * m].to_vec())
                .expect("index shape")
        };
        Ok(self.push(value, Op::Index0(x, k)))
    }

    /// Contiguous slice along axis 0.
    pub fn slice0(&self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let value = {
            let nodes = self.nodes.borrow();
            let vx = &nodes[x.0].value;
            let (n, m) = leading_split(vx.shape())?;
            if start + len > n || len == 0 {
                return Err(Error::Dimension(format!(
                    "slice0: [{start}, {}) out of axis length {n}",
                    start + len
                )));
            }
            let mut shape = vx.shape().to_vec();
            shape[0] = len;
            NdArray::from_vec(shape, vx.data()[start * m..(start + len) * m].to_vec())
                .expect("slice shape")
        };
        Ok(self.push(value, Op::Slice0 { x, start, len }))
    }

    /// [C, h, w] -> [C] by averaging over the spatial axes.
    pub fn spatial_mean(&self, x: NodeId) -> Result<NodeId> {
        let value = {
            let nodes = self.nodes.borrow();
            let vx = &nodes[x.0].value;
            if vx.shape().len() != 3 {
                return Err(Error::Dimension(format!(
                    "spatial_mean: expected [C,h,w], got {:?}",
                    vx.shape()
                )));
            }
            let (c, hw) = (vx.shape()[0], vx.shape()[1] * vx.shape()[2]);
            let inv = S::from_f64(1.0 / hw as f64);
            let xd = vx.data();
            let mut out = vec![S::ZERO; c];
            for (ci, o) in out.iter_mut().enumerate() {
                let mut acc = S::ZERO;
                for &v in &xd[ci * hw..(ci + 1) * hw] {
                    acc = acc + v;
                }
                *o = acc * inv;
            }
            NdArray::from_vec(vec![c], out).expect("spatial_mean shape")
        };
        Ok(self.push(value, Op::SpatialMean(x)))
    }

    /// One element of a rank-1 array as a [1]-shaped node.
    pub fn pick(&self, x: NodeId, idx: usize) -> Result<NodeId> {
        let value = {
            let nodes = self.nodes.borrow();
            let vx = &nodes[x.0].value;
            if vx.shape().len() != 1 || idx >= vx.len() {
                return Err(Error::Dimension(format!(
                    "pick: index {idx} in array {:?}",
                    vx.shape()
                )));
            }
            NdArray::scalar(vx.data()[idx])
        };
        Ok(self.push(value, Op::Pick(x, idx)))
    }

    /// Array scaled by a [1]-shaped scalar node.
    pub fn scalar_mul(&self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let value = {
            let nodes = self.nodes.borrow();
            let vs = &nodes[s.0].value;
            if vs.len() != 1 {
                return Err(Error::Dimension("scalar_mul: scale must be one element".into()));
            }
            let sv = vs.data()[0];
            nodes[a.0].value.map(|x| x * sv)
        };
        Ok(self.push(value, Op::ScalarMul { a, s }))
    }

    /// Ordinal logits over `log_coeff.len()` classes from per-pixel mode q in (0,1).
    pub fn binomial_logits(&self, q: NodeId, log_coeff: Vec<f64>) -> Result<NodeId> {
        let value = {
            let nodes = self.nodes.borrow();
            let vq = &nodes[q.0].value;
            if vq.shape().len() != 2 {
                return Err(Error::Dimension(format!(
                    "binomial_logits: q must be [h, w], got {:?}",
                    vq.shape()
                )));
            }
            if vq.data().iter().any(|v| {
                let f = v.to_f64();
                !(0.0 < f && f < 1.0)
            }) {
                return Err(Error::Contract("binomial_logits: q must lie in (0,1)".into()));
            }
            let n_total = log_coeff.len();
            let n = (n_total - 1) as f64;
            let (h, w) = (vq.shape()[0], vq.shape()[1]);
            let m = h * w;
            let mut out = vec![S::ZERO; n_total * m];
            for (p, &qv) in vq.data().iter().enumerate() {
                let qf = qv.to_f64();
                let (lq, l1q) = (qf.ln(), (1.0 - qf).ln());
                for (k, &lc) in log_coeff.iter().enumerate() {
                    let kf = k as f64;
                    out[k * m + p] = S::from_f64(lc + kf * lq + (n - kf) * l1q);
                }
            }
            NdArray::from_vec(vec![n_total, h, w], out).expect("binomial shape")
        };
        Ok(self.push(value, Op::BinomialLogits { q, log_coeff }))
    }

    /// Reverse sweep from a scalar root, accumulating into stored gradients.
    /// Repeated calls without [`Tape::zero_grad`] add up.
    pub fn backward(&self, root: NodeId) -> Result<()> {
        {
            let nodes = self.nodes.borrow();
            if nodes[root.0].value.len() != 1 {
                return Err(Error::Contract(format!(
                    "backward: root must be scalar, got shape {:?}",
                    nodes[root.0].value.shape()
                )));
            }
        }
        let count = root.0 + 1;
        let mut pending: Vec<Option<NdArray<S>>> = (0..count).map(|_| None).collect();
        let mut done: Vec<Option<NdArray<S>>> = (0..count).map(|_| None).collect();
        {
            let nodes = self.nodes.borrow();
            pending[root.0] =
                Some(NdArray::full(nodes[root.0].value.shape().to_vec(), S::ONE));
            for i in (0..count).rev() {
                let Some(g) = pending[i].take() else { continue };
                backprop(&nodes, i, &g, &mut pending);
                done[i] = Some(g);
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        for (i, g) in done.into_iter().enumerate() {
            if let Some(g) = g {
                match &mut nodes[i].grad {
                    Some(existing) => existing.add_scaled(&g, S::ONE),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

/// One padded 3-tap row of the convolution, branch-free inner loops.
/// y[ox] += sum_kx w[kx] * x[ox*stride + kx - 1] over in-bounds taps.
#[inline]
fn conv_row_fwd<S: Scalar>(y: &mut [S], x: &[S], w: &[S], stride: usize, in_w: usize) {
    debug_assert_eq!(x.len(), in_w);
    if stride == 1 {
        let n = y.len();
        // kx = 0 reads x[ox - 1]: valid for ox >= 1.
        let w0 = w[0];
        for (yv, &xv) in y[1..].iter_mut().zip(&x[..n - 1]) {
            *yv = *yv + xv * w0;
        }
        let w1 = w[1];
        for (yv, &xv) in y.iter_mut().zip(x) {
            *yv = *yv + xv * w1;
        }
        // kx = 2 reads x[ox + 1]: valid for ox < n - 1.
        let w2 = w[2];
        for (yv, &xv) in y[..n - 1].iter_mut().zip(&x[1..]) {
            *yv = *yv + xv * w2;
        }
    } else {
        for (kx, &wv) in w.iter().enumerate() {
            // Output ox reads x[ox*stride + kx - 1].
            let (y_start, x_start) = if kx == 0 { (1, stride - 1) } else { (0, kx - 1) };
            for (yv, &xv) in y[y_start..].iter_mut().zip(x[x_start..].iter().step_by(stride)) {
                *yv = *yv + xv * wv;
            }
        }
    }
}

/// Transpose of `conv_row_fwd`: scatters output-row gradients back to the
/// input row.
#[inline]
fn conv_row_bwd_input<S: Scalar>(dx: &mut [S], g: &[S], w: &[S], stride: usize) {
    if stride == 1 {
        let n = g.len();
        let w0 = w[0];
        for (&gv, dv) in g[1..].iter().zip(dx[..n - 1].iter_mut()) {
            *dv = *dv + gv * w0;
        }
        let w1 = w[1];
        for (&gv, dv) in g.iter().zip(dx.iter_mut()) {
            *dv = *dv + gv * w1;
        }
        let w2 = w[2];
        for (&gv, dv) in g[..n - 1].iter().zip(dx[1..].iter_mut()) {
            *dv = *dv + gv * w2;
        }
    } else {
        for (kx, &wv) in w.iter().enumerate() {
            let (g_start, x_start) = if kx == 0 { (1, stride - 1) } else { (0, kx - 1) };
            for (&gv, dv) in g[g_start..].iter().zip(dx[x_start..].iter_mut().step_by(stride)) {
                *dv = *dv + gv * wv;
            }
        }
    }
}

/// Per-tap dot products of the output-row gradient with the input row.
#[inline]
fn conv_row_bwd_weight<S: Scalar>(dw: &mut [S], g: &[S], x: &[S], stride: usize) {
    if stride == 1 {
        let n = g.len();
        let mut acc0 = S::ZERO;
        for (&gv, &xv) in g[1..].iter().zip(&x[..n - 1]) {
            acc0 = acc0 + gv * xv;
        }
        dw[0] = dw[0] + acc0;
        let mut acc1 = S::ZERO;
        for (&gv, &xv) in g.iter().zip(x) {
            acc1 = acc1 + gv * xv;
        }
        dw[1] = dw[1] + acc1;
        let mut acc2 = S::ZERO;
        for (&gv, &xv) in g[..n - 1].iter().zip(&x[1..]) {
            acc2 = acc2 + gv * xv;
        }
        dw[2] = dw[2] + acc2;
    } else {
        for (kx, dwv) in dw.iter_mut().enumerate() {
            let (g_start, x_start) = if kx == 0 { (1, stride - 1) } else { (0, kx - 1) };
            let mut acc = S::ZERO;
            for (&gv, &xv) in g[g_start..].iter().zip(x[x_start..].iter().step_by(stride)) {
                acc = acc + gv * xv;
            }
            *dwv = *dwv + acc;
        }
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    // Evaluated from the negative side so exp never overflows.
    if x >= S::ZERO {
        S::ONE / (S::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::ONE + e)
    }
}

fn softplus<S: Scalar>(x: S) -> S {
    x.maximum(S::ZERO) + (S::ONE + (-x.abs()).exp()).ln()
}

fn linear_dims<S: Scalar>(w: &NdArray<S>, b: &NdArray<S>) -> Result<(usize, usize)> {
    if w.shape().len() != 2 {
        return Err(Error::Dimension(format!("layer weight must be [out,in], got {:?}", w.shape())));
    }
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    if b.shape() != [out_dim] {
        return Err(Error::Dimension(format!(
            "layer bias {:?} does not match weight {:?}",
            b.shape(),
            w.shape()
        )));
    }
    Ok((out_dim, in_dim))
}

fn leading_split(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.is_empty() {
        return Err(Error::Dimension("axis-0 op needs at least one axis".into()));
    }
    Ok((shape[0], shape[1..].iter().product::<usize>().max(1)))
}

fn rest_shape(shape: &[usize]) -> Vec<usize> {
    if shape.len() == 1 {
        vec![1]
    } else {
        shape[1..].to_vec()
    }
}

fn spatial_shape(shape: &[usize]) -> Result<(usize, usize, usize, bool)> {
    match shape.len() {
        2 => Ok((1, shape[0], shape[1], true)),
        3 => Ok((shape[0], shape[1], shape[2], false)),
        _ => Err(Error::Dimension(format!("spatial op expects [h,w] or [C,h,w], got {shape:?}"))),
    }
}

fn acc<'v, S: Scalar>(
    pending: &'v mut [Option<NdArray<S>>],
    id: NodeId,
    shape: &[usize],
) -> &'v mut NdArray<S> {
    pending[id.0].get_or_insert_with(|| NdArray::zeros(shape.to_vec()))
}

#[allow(clippy::too_many_lines)]
fn backprop<S: Scalar>(
    nodes: &[Node<S>],
    i: usize,
    g: &NdArray<S>,
    pending: &mut [Option<NdArray<S>>],
) {
    let shape_of = |id: NodeId| nodes[id.0].value.shape();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(pending, *a, shape_of(*a)).add_scaled(g, S::ONE);
            acc(pending, *b, shape_of(*b)).add_scaled(g, S::ONE);
        }
        Op::Sub(a, b) => {
            acc(pending, *a, shape_of(*a)).add_scaled(g, S::ONE);
            acc(pending, *b, shape_of(*b)).add_scaled(g, -S::ONE);
        }
        Op::Mul(a, b) => {
            {
                let vb = &nodes[b.0].value;
                let da = acc(pending, *a, shape_of(*a));
                for ((d, &gv), &bv) in da.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                    *d = *d + gv * bv;
                }
            }
            let va = &nodes[a.0].value;
            let db = acc(pending, *b, shape_of(*b));
            for ((d, &gv), &av) in db.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                *d = *d + gv * av;
            }
        }
        Op::Div(a, b) => {
            {
                let vb = &nodes[b.0].value;
                let da = acc(pending, *a, shape_of(*a));
                for ((d, &gv), &bv) in da.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                    *d = *d + gv / bv;
                }
            }
            let va = &nodes[a.0].value;
            let vb = &nodes[b.0].value;
            let db = acc(pending, *b, shape_of(*b));
            for (((d, &gv), &av), &bv) in
                db.data_mut().iter_mut().zip(g.data()).zip(va.data()).zip(vb.data())
            {
                *d = *d - gv * av / (bv * bv);
            }
        }
        Op::AddScalar(a, _) => {
            acc(pending, *a, shape_of(*a)).add_scaled(g, S::ONE);
        }
        Op::MulScalar(a, c) => {
            acc(pending, *a, shape_of(*a)).add_scaled(g, *c);
        }
        Op::Exp(a) => {
            let y = &nodes[i].value;
            let da = acc(pending, *a, shape_of(*a));
            for ((d, &gv), &yv) in da.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                *d = *d + gv * yv;
            }
        }
        Op::Ln(a) => {
            let vx = &nodes[a.0].value;
            let da = acc(pending, *a, shape_of(*a));
            for ((d, &gv), &xv) in da.data_mut().iter_mut().zip(g.data()).zip(vx.data()) {
                *d = *d + gv / xv;
            }
        }
        Op::Sqrt(a) => {
            let y = &nodes[i].value;
            let half = S::from_f64(0.5);
            let da = acc(pending, *a, shape_of(*a));
            for ((d, &gv), &yv) in da.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                *d = *d + gv * half / yv;
            }
        }
        Op::Sigmoid(a) => {
            let y = &nodes[i].value;
            let da = acc(pending, *a, shape_of(*a));
            for ((d, &gv), &yv) in da.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                *d = *d + gv * yv * (S::ONE - yv);
            }
        }
        Op::Softplus(a) => {
            let vx = &nodes[a.0].value;
            let da = acc(pending, *a, shape_of(*a));
            for ((d, &gv), &xv) in da.data_mut().iter_mut().zip(g.data()).zip(vx.data()) {
                *d = *d + gv * sigmoid(xv);
            }
        }
        Op::Silu(a) => {
            let vx = &nodes[a.0].value;
            let da = acc(pending, *a, shape_of(*a));
            for ((d, &gv), &xv) in da.data_mut().iter_mut().zip(g.data()).zip(vx.data()) {
                let s = sigmoid(xv);
                *d = *d + gv * s * (S::ONE + xv * (S::ONE - s));
            }
        }
        Op::AbsPow(a, gamma) => {
            let vx = &nodes[a.0].value;
            let gm = S::from_f64(*gamma);
            let gm1 = S::from_f64(*gamma - 1.0);
            let da = acc(pending, *a, shape_of(*a));
            for ((d, &gv), &xv) in da.data_mut().iter_mut().zip(g.data()).zip(vx.data()) {
                if xv != S::ZERO {
                    let sign = if xv > S::ZERO { S::ONE } else { -S::ONE };
                    *d = *d + gv * gm * xv.abs().powf(gm1) * sign;
                }
            }
        }
        Op::Clamp(a, lo, hi) => {
            let vx = &nodes[a.0].value;
            let (l, h) = (S::from_f64(*lo), S::from_f64(*hi));
            let da = acc(pending, *a, shape_of(*a));
            for ((d, &gv), &xv) in da.data_mut().iter_mut().zip(g.data()).zip(vx.data()) {
                if xv >= l && xv <= h {
                    *d = *d + gv;
                }
            }
        }
        Op::Linear { x, w, b } => {
            let vx = &nodes[x.0].value;
            let vw = &nodes[w.0].value;
            let in_dim = vw.shape()[1];
            let out_dim = vw.shape()[0];
            let rows = vx.len() / in_dim;
            {
                let dx = acc(pending, *x, shape_of(*x));
                let dxd = dx.data_mut();
                for r in 0..rows {
                    let gr = &g.data()[r * out_dim..(r + 1) * out_dim];
                    let dxr = &mut dxd[r * in_dim..(r + 1) * in_dim];
                    for o in 0..out_dim {
                        let wrow = &vw.data()[o * in_dim..(o + 1) * in_dim];
                        let gv = gr[o];
                        for i2 in 0..in_dim {
                            dxr[i2] = dxr[i2] + gv * wrow[i2];
                        }
                    }
                }
            }
            {
                let dw = acc(pending, *w, shape_of(*w));
                let dwd = dw.data_mut();
                for r in 0..rows {
                    let gr = &g.data()[r * out_dim..(r + 1) * out_dim];
                    let xr = &vx.data()[r * in_dim..(r + 1) * in_dim];
                    for o in 0..out_dim {
                        let gv = gr[o];
                        let dwr = &mut dwd[o * in_dim..(o + 1) * in_dim];
                        for i2 in 0..in_dim {
                            dwr[i2] = dwr[i2] + gv * xr[i2];
                        }
                    }
                }
            }
            let db = acc(pending, *b, shape_of(*b));
            let dbd = db.data_mut();
            for r in 0..rows {
                let gr = &g.data()[r * out_dim..(r + 1) * out_dim];
                for o in 0..out_dim {
                    dbd[o] = dbd[o] + gr[o];
                }
            }
        }
        Op::PointwiseLinear { x, w, b } => {
            let vx = &nodes[x.0].value;
            let vw = &nodes[w.0].value;
            let in_ch = vw.shape()[1];
            let out_ch = vw.shape()[0];
            let pixels = vx.len() / in_ch;
            {
                let dx = acc(pending, *x, shape_of(*x));
                let dxd = dx.data_mut();
                for o in 0..out_ch {
                    let go = &g.data()[o * pixels..(o + 1) * pixels];
                    for i2 in 0..in_ch {
                        let wv = vw.data()[o * in_ch + i2];
                        let dxi = &mut dxd[i2 * pixels..(i2 + 1) * pixels];
                        for p in 0..pixels {
                            dxi[p] = dxi[p] + go[p] * wv;
                        }
                    }
                }
            }
            {
                let dw = acc(pending, *w, shape_of(*w));
                let dwd = dw.data_mut();
                for o in 0..out_ch {
                    let go = &g.data()[o * pixels..(o + 1) * pixels];
                    for i2 in 0..in_ch {
                        let xi = &vx.data()[i2 * pixels..(i2 + 1) * pixels];
                        let mut accv = S::ZERO;
                        for p in 0..pixels {
                            accv = accv + go[p] * xi[p];
                        }
                        dwd[o * in_ch + i2] = dwd[o * in_ch + i2] + accv;
                    }
                }
            }
            let db = acc(pending, *b, shape_of(*b));
            let dbd = db.data_mut();
            for o in 0..out_ch {
                let go = &g.data()[o * pixels..(o + 1) * pixels];
                let mut accv = S::ZERO;
                for &gv in go {
                    accv = accv + gv;
                }
                dbd[o] = dbd[o] + accv;
            }
        }
        Op::Conv2d { x, w, b, stride } => {
            let vx = &nodes[x.0].value;
            let vw = &nodes[w.0].value;
            let (out_ch, in_ch) = (vw.shape()[0], vw.shape()[1]);
            let (in_h, in_w) = (vx.shape()[1], vx.shape()[2]);
            let (out_h, out_w) = ((in_h - 1) / stride + 1, (in_w - 1) / stride + 1);
            {
                let dx = acc(pending, *x, shape_of(*x));
                let dxd = dx.data_mut();
                for o in 0..out_ch {
                    let go = &g.data()[o * out_h * out_w..(o + 1) * out_h * out_w];
                    for i2 in 0..in_ch {
                        let wk = &vw.data()[(o * in_ch + i2) * 9..(o * in_ch + i2) * 9 + 9];
                        let dxi = &mut dxd[i2 * in_h * in_w..(i2 + 1) * in_h * in_w];
                        for oy in 0..out_h {
                            let grow = &go[oy * out_w..(oy + 1) * out_w];
                            for ky in 0..3 {
                                let iy = oy * stride + ky;
                                if iy == 0 || iy > in_h {
                                    continue;
                                }
                                conv_row_bwd_input(
                                    &mut dxi[(iy - 1) * in_w..iy * in_w],
                                    grow,
                                    &wk[ky * 3..ky * 3 + 3],
                                    *stride,
                                );
                            }
                        }
                    }
                }
            }
            {
                let dw = acc(pending, *w, shape_of(*w));
                let dwd = dw.data_mut();
                for o in 0..out_ch {
                    let go = &g.data()[o * out_h * out_w..(o + 1) * out_h * out_w];
                    for i2 in 0..in_ch {
                        let xi = &vx.data()[i2 * in_h * in_w..(i2 + 1) * in_h * in_w];
                        let dwk = &mut dwd[(o * in_ch + i2) * 9..(o * in_ch + i2) * 9 + 9];
                        for oy in 0..out_h {
                            let grow = &go[oy * out_w..(oy + 1) * out_w];
                            for ky in 0..3 {
                                let iy = oy * stride + ky;
                                if iy == 0 || iy > in_h {
                                    continue;
                                }
                                conv_row_bwd_weight(
                                    &mut dwk[ky * 3..ky * 3 + 3],
                                    grow,
                                    &xi[(iy - 1) * in_w..iy * in_w],
                                    *stride,
                                );
                            }
                        }
                    }
                }
            }
            let db = acc(pending, *b, shape_of(*b));
            let dbd = db.data_mut();
            for o in 0..out_ch {
                let go = &g.data()[o * out_h * out_w..(o + 1) * out_h * out_w];
                let mut accv = S::ZERO;
                for &gv in go {
                    accv = accv + gv;
                }
                dbd[o] = dbd[o] + accv;
            }
        }
        Op::Resample(x) => {
            let (ch, in_h, in_w, _) = spatial_shape(nodes[x.0].value.shape()).expect("checked");
            let out_shape = nodes[i].value.shape();
            let (out_h, out_w) = if out_shape.len() == 2 {
                (out_shape[0], out_shape[1])
            } else {
                (out_shape[1], out_shape[2])
            };
            let dx = acc(pending, *x, shape_of(*x));
            let dxd = dx.data_mut();
            for (oy, ox, y0, y1, wy, x0, x1, wx) in bilinear_taps(in_h, in_w, out_h, out_w) {
                for c in 0..ch {
                    let gv = g.data()[c * out_h * out_w + oy * out_w + ox].to_f64();
                    let base = c * in_h * in_w;
                    let add = |d: &mut [S], idx: usize, w: f64| {
                        d[idx] = d[idx] + S::from_f64(gv * w);
                    };
                    add(dxd, base + y0 * in_w + x0, (1.0 - wy) * (1.0 - wx));
                    add(dxd, base + y0 * in_w + x1, (1.0 - wy) * wx);
                    add(dxd, base + y1 * in_w + x0, wy * (1.0 - wx));
                    add(dxd, base + y1 * in_w + x1, wy * wx);
                }
            }
        }
        Op::ChannelSoftmax(x) => {
            let y = &nodes[i].value;
            let (n, m) = leading_split(y.shape()).expect("checked");
            let dx = acc(pending, *x, shape_of(*x));
            let dxd = dx.data_mut();
            for col in 0..m {
                let mut dot = S::ZERO;
                for k in 0..n {
                    dot = dot + g.data()[k * m + col] * y.data()[k * m + col];
                }
                for k in 0..n {
                    let idx = k * m + col;
                    dxd[idx] = dxd[idx] + y.data()[idx] * (g.data()[idx] - dot);
                }
            }
        }
        Op::ChannelLogSoftmax(x) => {
            let y = &nodes[i].value;
            let (n, m) = leading_split(y.shape()).expect("checked");
            let dx = acc(pending, *x, shape_of(*x));
            let dxd = dx.data_mut();
            for col in 0..m {
                let mut gsum = S::ZERO;
                for k in 0..n {
                    gsum = gsum + g.data()[k * m + col];
                }
                for k in 0..n {
                    let idx = k * m + col;
                    dxd[idx] = dxd[idx] + g.data()[idx] - y.data()[idx].exp() * gsum;
                }
            }
        }
        Op::ChannelCumsum(x) => {
            let (n, m) = leading_split(nodes[x.0].value.shape()).expect("checked");
            let dx = acc(pending, *x, shape_of(*x));
            let dxd = dx.data_mut();
            for col in 0..m {
                let mut suffix = S::ZERO;
                for k in (0..n).rev() {
                    suffix = suffix + g.data()[k * m + col];
                    dxd[k * m + col] = dxd[k * m + col] + suffix;
                }
            }
        }
        Op::ChannelSum(x) => {
            let (n, m) = leading_split(nodes[x.0].value.shape()).expect("checked");
            let dx = acc(pending, *x, shape_of(*x));
            let dxd = dx.data_mut();
            for k in 0..n {
                for col in 0..m {
                    dxd[k * m + col] = dxd[k * m + col] + g.data()[col];
                }
            }
        }
        Op::SumAll(x) => {
            let gv = g.data()[0];
            let dx = acc(pending, *x, shape_of(*x));
            for d in dx.data_mut() {
                *d = *d + gv;
            }
        }
        Op::Concat0(a, b) => {
            let la = nodes[a.0].value.len();
            {
                let da = acc(pending, *a, shape_of(*a));
                for (d, &gv) in da.data_mut().iter_mut().zip(&g.data()[..la]) {
                    *d = *d + gv;
                }
            }
            let db = acc(pending, *b, shape_of(*b));
            for (d, &gv) in db.data_mut().iter_mut().zip(&g.data()[la..]) {
                *d = *d + gv;
            }
        }
        Op::Broadcast0(x, n) => {
            let m = nodes[x.0].value.len();
            let dx = acc(pending, *x, shape_of(*x));
            let dxd = dx.data_mut();
            for k in 0..*n {
                for col in 0..m {
                    dxd[col] = dxd[col] + g.data()[k * m + col];
                }
            }
        }
        Op::Interleave0(a, b) => {
            let (n, m) = leading_split(nodes[a.0].value.shape()).expect("checked");
            {
                let da = acc(pending, *a, shape_of(*a));
                let dad = da.data_mut();
                for k in 0..n {
                    for col in 0..m {
                        dad[k * m + col] = dad[k * m + col] + g.data()[2 * k * m + col];
                    }
                }
            }
            let db = acc(pending, *b, shape_of(*b));
            let dbd = db.data_mut();
            for k in 0..n {
                for col in 0..m {
                    dbd[k * m + col] = dbd[k * m + col] + g.data()[(2 * k + 1) * m + col];
                }
            }
        }
        Op::Index0(x, k) => {
            let m = g.len();
            let dx = acc(pending, *x, shape_of(*x));
            let dxd = dx.data_mut();
            for col in 0..m {
                dxd[k * m + col] = dxd[k * m + col] + g.data()[col];
            }
        }
        Op::Slice0 { x, start, len } => {
            let m = g.len() / len;
            let dx = acc(pending, *x, shape_of(*x));
            let dxd = dx.data_mut();
            for (i, &gv) in g.data().iter().enumerate() {
                dxd[start * m + i] = dxd[start * m + i] + gv;
            }
        }
        Op::SpatialMean(x) => {
            let shape = nodes[x.0].value.shape().to_vec();
            let hw = shape[1] * shape[2];
            let inv = S::from_f64(1.0 / hw as f64);
            let dx = acc(pending, *x, &shape);
            let dxd = dx.data_mut();
            for c in 0..shape[0] {
                let gv = g.data()[c] * inv;
                for d in &mut dxd[c * hw..(c + 1) * hw] {
                    *d = *d + gv;
                }
            }
        }
        Op::Pick(x, idx) => {
            let gv = g.data()[0];
            let dx = acc(pending, *x, shape_of(*x));
            dx.data_mut()[*idx] = dx.data_mut()[*idx] + gv;
        }
        Op::ScalarMul { a, s } => {
            let sv = nodes[s.0].value.data()[0];
            let va = &nodes[a.0].value;
            {
                let da = acc(pending, *a, shape_of(*a));
                for (d, &gv) in da.data_mut().iter_mut().zip(g.data()) {
                    *d = *d + gv * sv;
                }
            }
            let ds = acc(pending, *s, shape_of(*s));
            let mut accv = S::ZERO;
            for (&gv, &av) in g.data().iter().zip(va.data()) {
                accv = accv + gv * av;
            }
            ds.data_mut()[0] = ds.data_mut()[0] + accv;
        }
        Op::BinomialLogits { q, log_coeff } => {
            let vq = &nodes[q.0].value;
            let n_total = log_coeff.len();
            let n = (n_total - 1) as f64;
            let m = vq.len();
            let dq = acc(pending, *q, shape_of(*q));
            let dqd = dq.data_mut();
            for (p, &qv) in vq.data().iter().enumerate() {
                let qf = qv.to_f64();
                let mut accv = 0.0;
                for k in 0..n_total {
                    let kf = k as f64;
                    accv += g.data()[k * m + p].to_f64() * (kf / qf - (n - kf) / (1.0 - qf));
                }
                dqd[p] = dqd[p] + S::from_f64(accv);
            }
        }
    }
}
