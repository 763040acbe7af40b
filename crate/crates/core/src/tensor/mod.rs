//! Dense tensors and reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape of eagerly-evaluated operation records. Node values
//! are immutable once created; [`Graph::backward`] walks the tape in reverse
//! and returns per-node gradients without mutating the graph, so a graph can
//! be differentiated and inspected freely afterwards. A graph is confined to
//! one thread; independent graphs may run in parallel.
//!
//! Layout conventions: image-like tensors are `[C, H, W]` row-major with the
//! channel axis outermost, scalars have an empty shape, and per-channel
//! parameter stacks use `[C, r, m]` with [`Graph::chan_matvec`] acting as a
//! batched matrix product over the channel axis.

pub(crate) mod conv;

use crate::{Error, Result};
use rand::Rng;
use std::f64::consts::PI;

pub(crate) use conv::conv_out_dim;

/// Dense n-dimensional value: `product(shape) == data.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} elements, data has {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() requires a scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Handle to a named tensor in a [`Params`] store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter store. Insertion order is fixed, which keeps optimizer
/// state, checkpoints and gradient accumulation aligned without any hashing.
#[derive(Clone, Debug, Default)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            self.id_of(name).is_none(),
            "duplicate parameter name {name:?}"
        );
        self.entries.push((name.to_string(), value));
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    PowScalar(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Abs(NodeId),
    NormalCdf(NodeId),
    Clamp(NodeId, f64, f64),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    ConcatChannels(NodeId, NodeId),
    AddChannelBias {
        input: NodeId,
        bias: NodeId,
    },
    AddNoise {
        input: NodeId,
    },
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
    },
    ConvTranspose2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
    },
    DepthwiseConvValid {
        input: NodeId,
        kernel: Vec<f64>,
        k: usize,
    },
    AvgPool2(NodeId),
    ChanMatVec {
        weight: NodeId,
        input: NodeId,
    },
    AddChanVec {
        input: NodeId,
        vec: NodeId,
    },
    MulChanVec {
        input: NodeId,
        vec: NodeId,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the given node, if one was propagated.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

/// Reverse-mode autodiff tape. Operations evaluate eagerly; every method
/// returning [`NodeId`] appends exactly one node.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<(ParamId, NodeId)>,
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Standard normal CDF, evaluated without cancellation in either tail.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn numel(&self, id: NodeId) -> usize {
        self.nodes[id.0].data.len()
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor {
            shape: self.nodes[id.0].shape.clone(),
            data: self.nodes[id.0].data.clone(),
        }
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// All parameter bindings made through [`Graph::param`].
    pub fn bindings(&self) -> &[(ParamId, NodeId)] {
        &self.bindings
    }

    pub fn assert_finite(&self, id: NodeId) -> Result<()> {
        if self.nodes[id.0].data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "non-finite values in node {} ({:?})",
                id.0, self.nodes[id.0].op
            )))
        }
    }

    /// True when every node value in the graph is finite.
    pub fn all_finite(&self) -> bool {
        self.nodes.iter().all(|n| n.data.iter().all(|v| v.is_finite()))
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            op,
            shape,
            data,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant leaf; gradients do not flow into it.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), false)
    }

    /// Differentiable leaf; `backward` will produce a gradient for it.
    pub fn var(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), true)
    }

    /// Bind a stored parameter as a differentiable leaf and remember the
    /// binding so its gradient can be collected after `backward`.
    pub fn param(&mut self, params: &Params, id: ParamId) -> NodeId {
        let t = params.get(id);
        let node = self.push(Op::Leaf, t.shape.clone(), t.data.clone(), true);
        self.bindings.push((id, node));
        node
    }

    pub fn constant(&mut self, shape: &[usize], value: f64) -> NodeId {
        let n = shape.iter().product();
        self.push(Op::Leaf, shape.to_vec(), vec![value; n], false)
    }

    fn unary(&mut self, op: Op, a: NodeId, f: impl Fn(f64) -> f64) -> NodeId {
        let data = self.nodes[a.0].data.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(op, shape, data, rg)
    }

    fn binary(&mut self, op: Op, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> NodeId {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "elementwise op on mismatched shapes"
        );
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(op, shape, data, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Div(a, b), a, b, |x, y| x / y)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Neg(a), a, |x| -x)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        self.unary(Op::AddScalar(a), a, |x| x + s)
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        self.unary(Op::MulScalar(a, s), a, |x| x * s)
    }

    /// `x^p` for strictly positive `x`.
    pub fn pow_scalar(&mut self, a: NodeId, p: f64) -> NodeId {
        self.unary(Op::PowScalar(a, p), a, |x| x.powf(p))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Relu(a), a, |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Tanh(a), a, f64::tanh)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sigmoid(a), a, stable_sigmoid)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Softplus(a), a, stable_softplus)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp(a), a, f64::exp)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Ln(a), a, f64::ln)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sqrt(a), a, f64::sqrt)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Square(a), a, |x| x * x)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Abs(a), a, f64::abs)
    }

    /// Standard normal CDF applied elementwise.
    pub fn normal_cdf(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::NormalCdf(a), a, normal_cdf)
    }

    /// Clamp into `[lo, hi]`; the gradient is passed through only where the
    /// input already lies inside the interval.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(Op::Clamp(a, lo, hi), a, |x| x.clamp(lo, hi))
    }

    pub fn clamp_min(&mut self, a: NodeId, lo: f64) -> NodeId {
        self.clamp(a, lo, f64::INFINITY)
    }

    pub fn clamp_max(&mut self, a: NodeId, hi: f64) -> NodeId {
        self.clamp(a, f64::NEG_INFINITY, hi)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].data.iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::Sum(a), Vec::new(), vec![s], rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].data.len() as f64;
        let s = self.nodes[a.0].data.iter().sum::<f64>() / n;
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::Mean(a), Vec::new(), vec![s], rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.nodes[a.0].data.len(),
            "reshape changes element count"
        );
        let data = self.nodes[a.0].data.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::Reshape(a), shape.to_vec(), data, rg)
    }

    /// Concatenate along the channel (outermost) axis of `[C, ...]` tensors.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() < 2 || sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(Error::Shape(format!(
                "concat_channels on incompatible shapes {sa:?} and {sb:?}"
            )));
        }
        let mut shape = sa.clone();
        shape[0] += sb[0];
        let mut data = Vec::with_capacity(self.numel(a) + self.numel(b));
        data.extend_from_slice(&self.nodes[a.0].data);
        data.extend_from_slice(&self.nodes[b.0].data);
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(Op::ConcatChannels(a, b), shape, data, rg))
    }

    /// `input[c, ...] + bias[c]` for `[C, ...]` input and `[C]` bias.
    pub fn add_channel_bias(&mut self, input: NodeId, bias: NodeId) -> NodeId {
        let c = self.nodes[input.0].shape[0];
        assert_eq!(self.nodes[bias.0].shape, [c], "bias must be [C]");
        let m = self.numel(input) / c;
        let mut data = self.nodes[input.0].data.clone();
        for ch in 0..c {
            let b = self.nodes[bias.0].data[ch];
            for v in &mut data[ch * m..(ch + 1) * m] {
                *v += b;
            }
        }
        let shape = self.nodes[input.0].shape.clone();
        let rg = self.nodes[input.0].requires_grad || self.nodes[bias.0].requires_grad;
        self.push(Op::AddChannelBias { input, bias }, shape, data, rg)
    }

    /// `x + u` with `u ~ U[-0.5, 0.5)` i.i.d.; the noise is a constant of the
    /// graph, so the gradient passes through unchanged.
    pub fn add_uniform_noise(&mut self, input: NodeId, rng: &mut impl Rng) -> NodeId {
        let data: Vec<f64> = self.nodes[input.0]
            .data
            .iter()
            .map(|&v| v + (rng.random::<f64>() - 0.5))
            .collect();
        let shape = self.nodes[input.0].shape.clone();
        let rg = self.nodes[input.0].requires_grad;
        self.push(Op::AddNoise { input }, shape, data, rg)
    }

    /// Strided 2D convolution with "same"-style padding `k/2`. Spatial
    /// output is `ceil(H/s) x ceil(W/s)`; a transposed convolution maps
    /// `H x W` to `H*s x W*s` and so exactly inverts the spatial shape of a
    /// forward convolution whenever `s` divides `H` and `W`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        transposed: bool,
    ) -> Result<NodeId> {
        let ishape = self.nodes[input.0].shape.clone();
        let wshape = self.nodes[weight.0].shape.clone();
        if ishape.len() != 3 || wshape.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects [C,H,W] input and [Co,Ci,k,k] weight, got {ishape:?} and {wshape:?}"
            )));
        }
        let (ci, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (co, wci, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        if wci != ci {
            return Err(Error::Shape(format!(
                "conv2d input has {ci} channels but weight expects {wci}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Shape(format!("kernel must be square and odd, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::Shape("stride must be >= 1".into()));
        }
        if let Some(b) = bias {
            if self.nodes[b.0].shape != [co] {
                return Err(Error::Shape(format!(
                    "bias shape {:?} does not match {co} output channels",
                    self.nodes[b.0].shape
                )));
            }
        }
        let bias_data = bias.map(|b| self.nodes[b.0].data.clone());
        let (data, oh, ow) = if transposed {
            let d = conv::tconv2d_fwd(
                &self.nodes[input.0].data,
                (ci, h, w),
                &self.nodes[weight.0].data,
                co,
                kh,
                stride,
                bias_data.as_deref(),
            );
            (d, h * stride, w * stride)
        } else {
            let d = conv::conv2d_fwd(
                &self.nodes[input.0].data,
                (ci, h, w),
                &self.nodes[weight.0].data,
                co,
                kh,
                stride,
                bias_data.as_deref(),
            );
            (d, conv_out_dim(h, stride), conv_out_dim(w, stride))
        };
        let rg = self.nodes[input.0].requires_grad
            || self.nodes[weight.0].requires_grad
            || bias.map(|b| self.nodes[b.0].requires_grad).unwrap_or(false);
        let op = if transposed {
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                stride,
            }
        } else {
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            }
        };
        Ok(self.push(op, vec![co, oh, ow], data, rg))
    }

    /// Valid-mode depthwise correlation with a fixed (non-learned) kernel
    /// shared by all channels.
    pub fn depthwise_conv_valid(&mut self, input: NodeId, kernel: &[f64]) -> NodeId {
        let k = (kernel.len() as f64).sqrt() as usize;
        assert_eq!(k * k, kernel.len(), "kernel must be square");
        let shape = self.nodes[input.0].shape.clone();
        assert_eq!(shape.len(), 3);
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        assert!(h >= k && w >= k, "input smaller than kernel");
        let data = conv::depthwise_valid_fwd(&self.nodes[input.0].data, (c, h, w), kernel, k);
        let rg = self.nodes[input.0].requires_grad;
        self.push(
            Op::DepthwiseConvValid {
                input,
                kernel: kernel.to_vec(),
                k,
            },
            vec![c, h - k + 1, w - k + 1],
            data,
            rg,
        )
    }

    /// 2x2 average pooling with stride 2; trailing odd rows/columns are dropped.
    pub fn avg_pool2(&mut self, input: NodeId) -> NodeId {
        let shape = self.nodes[input.0].shape.clone();
        assert_eq!(shape.len(), 3);
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let (oh, ow) = (h / 2, w / 2);
        let src = &self.nodes[input.0].data;
        let mut data = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let base = (ch * h + 2 * y) * w + 2 * x;
                    data[(ch * oh + y) * ow + x] =
                        0.25 * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
                }
            }
        }
        let rg = self.nodes[input.0].requires_grad;
        self.push(Op::AvgPool2(input), vec![c, oh, ow], data, rg)
    }

    /// Per-channel matrix product: `weight [C, p, q]` times `input [C, q, m]`
    /// gives `[C, p, m]`.
    pub fn chan_matvec(&mut self, weight: NodeId, input: NodeId) -> NodeId {
        let ws = self.nodes[weight.0].shape.clone();
        let is = self.nodes[input.0].shape.clone();
        assert!(ws.len() == 3 && is.len() == 3 && ws[0] == is[0] && ws[2] == is[1]);
        let (c, p, q, m) = (ws[0], ws[1], ws[2], is[2]);
        let wd = &self.nodes[weight.0].data;
        let xd = &self.nodes[input.0].data;
        let mut data = vec![0.0; c * p * m];
        for ch in 0..c {
            for i in 0..p {
                for j in 0..q {
                    let wv = wd[(ch * p + i) * q + j];
                    if wv == 0.0 {
                        continue;
                    }
                    let xrow = &xd[(ch * q + j) * m..(ch * q + j + 1) * m];
                    let orow = &mut data[(ch * p + i) * m..(ch * p + i + 1) * m];
                    for t in 0..m {
                        orow[t] += wv * xrow[t];
                    }
                }
            }
        }
        let rg = self.nodes[weight.0].requires_grad || self.nodes[input.0].requires_grad;
        self.push(Op::ChanMatVec { weight, input }, vec![c, p, m], data, rg)
    }

    /// `input [C, r, m]` plus `vec [C, r]` broadcast over the last axis.
    pub fn add_chan_vec(&mut self, input: NodeId, vec: NodeId) -> NodeId {
        self.chan_vec(input, vec, true)
    }

    /// `input [C, r, m]` times `vec [C, r]` broadcast over the last axis.
    pub fn mul_chan_vec(&mut self, input: NodeId, vec: NodeId) -> NodeId {
        self.chan_vec(input, vec, false)
    }

    fn chan_vec(&mut self, input: NodeId, vec: NodeId, add: bool) -> NodeId {
        let is = self.nodes[input.0].shape.clone();
        let vs = self.nodes[vec.0].shape.clone();
        assert!(is.len() == 3 && vs.len() == 2 && is[0] == vs[0] && is[1] == vs[1]);
        let (c, r, m) = (is[0], is[1], is[2]);
        let mut data = self.nodes[input.0].data.clone();
        for ch in 0..c {
            for i in 0..r {
                let v = self.nodes[vec.0].data[ch * r + i];
                let row = &mut data[(ch * r + i) * m..(ch * r + i + 1) * m];
                if add {
                    row.iter_mut().for_each(|x| *x += v);
                } else {
                    row.iter_mut().for_each(|x| *x *= v);
                }
            }
        }
        let rg = self.nodes[input.0].requires_grad || self.nodes[vec.0].requires_grad;
        let op = if add {
            Op::AddChanVec { input, vec }
        } else {
            Op::MulChanVec { input, vec }
        };
        self.push(op, is, data, rg)
    }

    /// Reverse pass from a scalar loss node. Gradients accumulate as sums
    /// over all paths; nodes not on a differentiable path get none.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.numel(loss) != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let (before, rest) = grads.split_at_mut(id);
            let Some(g) = rest[0].as_ref() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, g, before);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], before: &mut [Option<Vec<f64>>]) {
        let wants = |t: NodeId| self.nodes[t.0].requires_grad;
        macro_rules! buf {
            ($t:expr) => {
                before[$t.0]
                    .get_or_insert_with(|| vec![0.0; self.nodes[$t.0].data.len()])
                    .as_mut_slice()
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    let d = buf!(a);
                    d.iter_mut().zip(g).for_each(|(x, &gv)| *x += gv);
                }
                if wants(*b) {
                    let d = buf!(b);
                    d.iter_mut().zip(g).for_each(|(x, &gv)| *x += gv);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    let d = buf!(a);
                    d.iter_mut().zip(g).for_each(|(x, &gv)| *x += gv);
                }
                if wants(*b) {
                    let d = buf!(b);
                    d.iter_mut().zip(g).for_each(|(x, &gv)| *x -= gv);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bd = &self.nodes[b.0].data;
                    let d = buf!(a);
                    for i in 0..g.len() {
                        d[i] += g[i] * bd[i];
                    }
                }
                if wants(*b) {
                    let ad = &self.nodes[a.0].data;
                    let d = buf!(b);
                    for i in 0..g.len() {
                        d[i] += g[i] * ad[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                if wants(*a) {
                    let d = buf!(a);
                    for i in 0..g.len() {
                        d[i] += g[i] / bd[i];
                    }
                }
                if wants(*b) {
                    let d = buf!(b);
                    for i in 0..g.len() {
                        d[i] -= g[i] * ad[i] / (bd[i] * bd[i]);
                    }
                }
            }
            Op::Neg(a) => {
                if wants(*a) {
                    let d = buf!(a);
                    d.iter_mut().zip(g).for_each(|(x, &gv)| *x -= gv);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) | Op::AddNoise { input: a } => {
                if wants(*a) {
                    let d = buf!(a);
                    d.iter_mut().zip(g).for_each(|(x, &gv)| *x += gv);
                }
            }
            Op::MulScalar(a, s) => {
                if wants(*a) {
                    let d = buf!(a);
                    d.iter_mut().zip(g).for_each(|(x, &gv)| *x += gv * s);
                }
            }
            Op::PowScalar(a, p) => {
                if wants(*a) {
                    let ad = &self.nodes[a.0].data;
                    let d = buf!(a);
                    for i in 0..g.len() {
                        d[i] += g[i] * p * ad[i].powf(p - 1.0);
                    }
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let ad = &self.nodes[a.0].data;
                    let d = buf!(a);
                    for i in 0..g.len() {
                        if ad[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if wants(*a) {
                    let out = &node.data;
                    let d = buf!(a);
                    for i in 0..g.len() {
                        d[i] += g[i] * (1.0 - out[i] * out[i]);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if wants(*a) {
                    let out = &node.data;
                    let d = buf!(a);
                    for i in 0..g.len() {
                        d[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                }
            }
            Op::Softplus(a) => {
                if wants(*a) {
                    let ad = &self.nodes[a.0].data;
                    let d = buf!(a);
                    for i in 0..g.len() {
                        d[i] += g[i] * stable_sigmoid(ad[i]);
                    }
                }
            }
            Op::Exp(a) => {
                if wants(*a) {
                    let out = &node.data;
                    let d = buf!(a);
                    for i in 0..g.len() {
                        d[i] += g[i] * out[i];
                    }
                }
            }
            Op::Ln(a) => {
                if wants(*a) {
                    let ad = &self.nodes[a.0].data;
                    let d = buf!(a);
                    for i in 0..g.len() {
                        d[i] += g[i] / ad[i];
                    }
                }
            }
            Op::Sqrt(a) => {
                if wants(*a) {
                    let out = &node.data;
                    let d = buf!(a);
                    for i in 0..g.len() {
                        d[i] += g[i] * 0.5 / out[i];
                    }
                }
            }
            Op::Square(a) => {
                if wants(*a) {
                    let ad = &self.nodes[a.0].data;
                    let d = buf!(a);
                    for i in 0..g.len() {
                        d[i] += g[i] * 2.0 * ad[i];
                    }
                }
            }
            Op::Abs(a) => {
                if wants(*a) {
                    let ad = &self.nodes[a.0].data;
                    let d = buf!(a);
                    for i in 0..g.len() {
                        d[i] += g[i] * if ad[i] > 0.0 { 1.0 } else if ad[i] < 0.0 { -1.0 } else { 0.0 };
                    }
                }
            }
            Op::NormalCdf(a) => {
                if wants(*a) {
                    let ad = &self.nodes[a.0].data;
                    let d = buf!(a);
                    for i in 0..g.len() {
                        d[i] += g[i] * normal_pdf(ad[i]);
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                if wants(*a) {
                    let ad = &self.nodes[a.0].data;
                    let d = buf!(a);
                    for i in 0..g.len() {
                        if ad[i] >= *lo && ad[i] <= *hi {
                            d[i] += g[i];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let d = buf!(a);
                    d.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if wants(*a) {
                    let n = self.nodes[a.0].data.len() as f64;
                    let d = buf!(a);
                    d.iter_mut().for_each(|x| *x += g[0] / n);
                }
            }
            Op::ConcatChannels(a, b) => {
                let na = self.nodes[a.0].data.len();
                if wants(*a) {
                    let d = buf!(a);
                    d.iter_mut().zip(&g[..na]).for_each(|(x, &gv)| *x += gv);
                }
                if wants(*b) {
                    let d = buf!(b);
                    d.iter_mut().zip(&g[na..]).for_each(|(x, &gv)| *x += gv);
                }
            }
            Op::AddChannelBias { input, bias } => {
                let c = self.nodes[bias.0].data.len();
                let m = g.len() / c;
                if wants(*input) {
                    let d = buf!(input);
                    d.iter_mut().zip(g).for_each(|(x, &gv)| *x += gv);
                }
                if wants(*bias) {
                    let d = buf!(bias);
                    for ch in 0..c {
                        d[ch] += g[ch * m..(ch + 1) * m].iter().sum::<f64>();
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            } => {
                let is = &self.nodes[input.0].shape;
                let (ci, h, w) = (is[0], is[1], is[2]);
                let ws = &self.nodes[weight.0].shape;
                let (co, k) = (ws[0], ws[2]);
                if wants(*input) {
                    let gi = conv::conv2d_bwd_input(
                        g,
                        (ci, h, w),
                        &self.nodes[weight.0].data,
                        co,
                        k,
                        *stride,
                    );
                    let d = buf!(input);
                    d.iter_mut().zip(&gi).for_each(|(x, &gv)| *x += gv);
                }
                if wants(*weight) {
                    let gw = conv::conv2d_bwd_weight(
                        g,
                        &self.nodes[input.0].data,
                        (ci, h, w),
                        co,
                        k,
                        *stride,
                    );
                    let d = buf!(weight);
                    d.iter_mut().zip(&gw).for_each(|(x, &gv)| *x += gv);
                }
                if let Some(b) = bias {
                    if wants(*b) {
                        let m = g.len() / co;
                        let d = buf!(b);
                        for o in 0..co {
                            d[o] += g[o * m..(o + 1) * m].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                stride,
            } => {
                let is = &self.nodes[input.0].shape;
                let (ci, h, w) = (is[0], is[1], is[2]);
                let ws = &self.nodes[weight.0].shape;
                let (co, k) = (ws[0], ws[2]);
                if wants(*input) {
                    let gi = conv::tconv2d_bwd_input(
                        g,
                        (ci, h, w),
                        &self.nodes[weight.0].data,
                        co,
                        k,
                        *stride,
                    );
                    let d = buf!(input);
                    d.iter_mut().zip(&gi).for_each(|(x, &gv)| *x += gv);
                }
                if wants(*weight) {
                    let gw = conv::tconv2d_bwd_weight(
                        g,
                        &self.nodes[input.0].data,
                        (ci, h, w),
                        co,
                        k,
                        *stride,
                    );
                    let d = buf!(weight);
                    d.iter_mut().zip(&gw).for_each(|(x, &gv)| *x += gv);
                }
                if let Some(b) = bias {
                    if wants(*b) {
                        let m = g.len() / co;
                        let d = buf!(b);
                        for o in 0..co {
                            d[o] += g[o * m..(o + 1) * m].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::DepthwiseConvValid { input, kernel, k } => {
                if wants(*input) {
                    let is = &self.nodes[input.0].shape;
                    let gi = conv::depthwise_valid_bwd(g, (is[0], is[1], is[2]), kernel, *k);
                    let d = buf!(input);
                    d.iter_mut().zip(&gi).for_each(|(x, &gv)| *x += gv);
                }
            }
            Op::AvgPool2(a) => {
                if wants(*a) {
                    let is = &self.nodes[a.0].shape;
                    let (c, h, w) = (is[0], is[1], is[2]);
                    let (oh, ow) = (h / 2, w / 2);
                    let d = buf!(a);
                    for ch in 0..c {
                        for y in 0..oh {
                            for x in 0..ow {
                                let gv = 0.25 * g[(ch * oh + y) * ow + x];
                                let base = (ch * h + 2 * y) * w + 2 * x;
                                d[base] += gv;
                                d[base + 1] += gv;
                                d[base + w] += gv;
                                d[base + w + 1] += gv;
                            }
                        }
                    }
                }
            }
            Op::ChanMatVec { weight, input } => {
                let ws = &self.nodes[weight.0].shape;
                let (c, p, q) = (ws[0], ws[1], ws[2]);
                let m = self.nodes[input.0].shape[2];
                if wants(*weight) {
                    let xd = &self.nodes[input.0].data;
                    let d = buf!(weight);
                    for ch in 0..c {
                        for i in 0..p {
                            let grow = &g[(ch * p + i) * m..(ch * p + i + 1) * m];
                            for j in 0..q {
                                let xrow = &xd[(ch * q + j) * m..(ch * q + j + 1) * m];
                                let mut acc = 0.0;
                                for t in 0..m {
                                    acc += grow[t] * xrow[t];
                                }
                                d[(ch * p + i) * q + j] += acc;
                            }
                        }
                    }
                }
                if wants(*input) {
                    let wd = &self.nodes[weight.0].data;
                    let d = buf!(input);
                    for ch in 0..c {
                        for i in 0..p {
                            let grow = &g[(ch * p + i) * m..(ch * p + i + 1) * m];
                            for j in 0..q {
                                let wv = wd[(ch * p + i) * q + j];
                                if wv == 0.0 {
                                    continue;
                                }
                                let drow = &mut d[(ch * q + j) * m..(ch * q + j + 1) * m];
                                for t in 0..m {
                                    drow[t] += wv * grow[t];
                                }
                            }
                        }
                    }
                }
            }
            Op::AddChanVec { input, vec } => {
                let vs = &self.nodes[vec.0].shape;
                let (c, r) = (vs[0], vs[1]);
                let m = g.len() / (c * r);
                if wants(*input) {
                    let d = buf!(input);
                    d.iter_mut().zip(g).for_each(|(x, &gv)| *x += gv);
                }
                if wants(*vec) {
                    let d = buf!(vec);
                    for i in 0..c * r {
                        d[i] += g[i * m..(i + 1) * m].iter().sum::<f64>();
                    }
                }
            }
            Op::MulChanVec { input, vec } => {
                let vs = &self.nodes[vec.0].shape;
                let (c, r) = (vs[0], vs[1]);
                let m = g.len() / (c * r);
                if wants(*input) {
                    let vd = &self.nodes[vec.0].data;
                    let d = buf!(input);
                    for i in 0..c * r {
                        let v = vd[i];
                        for t in 0..m {
                            d[i * m + t] += g[i * m + t] * v;
                        }
                    }
                }
                if wants(*vec) {
                    let xd = &self.nodes[input.0].data;
                    let d = buf!(vec);
                    for i in 0..c * r {
                        let mut acc = 0.0;
                        for t in 0..m {
                            acc += g[i * m + t] * xd[i * m + t];
                        }
                        d[i] += acc;
                    }
                }
            }
        }
    }
}

/// y_i = x_i / sqrt(beta_i + sum_j gamma_ij * x_j^2), or its inverse
/// (multiplication instead of division) when `inverse` is set. `beta` and
/// `gamma` are the actual (already non-negative) coefficients; positivity is
/// the caller's reparameterization duty.
pub fn gdn(
    g: &mut Graph,
    x: NodeId,
    beta: NodeId,
    gamma: NodeId,
    inverse: bool,
) -> Result<NodeId> {
    let c = g.shape(x)[0];
    if g.shape(beta) != [c] || g.shape(gamma) != [c, c] {
        return Err(Error::Shape(format!(
            "gdn expects beta [C] and gamma [C,C] for C={c}, got {:?} and {:?}",
            g.shape(beta),
            g.shape(gamma)
        )));
    }
    let x2 = g.square(x);
    let gamma4 = g.reshape(gamma, &[c, c, 1, 1]);
    let mixed = g.conv2d(x2, gamma4, None, 1, false)?;
    let denom_sq = g.add_channel_bias(mixed, beta);
    let denom = g.sqrt(denom_sq);
    Ok(if inverse {
        g.mul(x, denom)
    } else {
        g.div(x, denom)
    })
}


#[cfg(test)]
mod tests {
    use super::testutil::grad_check;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand::RngCore;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| {
            // Box-Muller from two uniforms.
            let u1 = (rng.next_u64() as f64 + 1.0) / (u64::MAX as f64 + 2.0);
            let u2 = rng.next_u64() as f64 / u64::MAX as f64;
            (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
        })
    }

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::new(vec![4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let mut g = Graph::new();
        let xid = g.var(&x);
        let sq = g.square(xid);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        let gx = grads.get(xid).unwrap();
        for (gv, xv) in gx.iter().zip(x.data()) {
            assert!((gv - 2.0 * xv).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.var(&Tensor::zeros(&[3]));
        let y = g.relu(x);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn concat_routes_gradients() {
        let a = Tensor::full(&[2, 2, 2], 1.0);
        let b = Tensor::full(&[3, 2, 2], 2.0);
        let mut g = Graph::new();
        let (ai, bi) = (g.var(&a), g.var(&b));
        let c = g.concat_channels(ai, bi).unwrap();
        assert_eq!(g.shape(c), &[5, 2, 2]);
        let loss = g.sum(c);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(ai).unwrap().iter().all(|&v| v == 1.0));
        assert!(grads.get(bi).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn conv_identity_kernel() {
        let x = randn(&[1, 4, 5], 3);
        let mut g = Graph::new();
        let xi = g.leaf(&x);
        let w = g.leaf(&Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let b = g.leaf(&Tensor::zeros(&[1]));
        let y = g.conv2d(xi, w, Some(b), 1, false).unwrap();
        assert_eq!(g.value(y), x.data());
    }

    #[test]
    fn conv_channel_mismatch_is_error() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::zeros(&[3, 4, 4]));
        let w = g.leaf(&Tensor::zeros(&[2, 4, 3, 3]));
        assert!(matches!(g.conv2d(x, w, None, 1, false), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_shapes_match_stride_arithmetic() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::zeros(&[3, 128, 256]));
        let w = g.leaf(&Tensor::zeros(&[32, 3, 5, 5]));
        let y = g.conv2d(x, w, None, 2, false).unwrap();
        assert_eq!(g.shape(y), &[32, 64, 128]);
    }

    #[test]
    fn transposed_then_forward_restores_any_shape() {
        for (h, w) in [(1, 1), (3, 5), (7, 2), (10, 9)] {
            let mut g = Graph::new();
            let x = g.leaf(&Tensor::zeros(&[2, h, w]));
            let wt = g.leaf(&Tensor::zeros(&[2, 2, 5, 5]));
            let up = g.conv2d(x, wt, None, 2, true).unwrap();
            assert_eq!(g.shape(up), &[2, 2 * h, 2 * w]);
            let down = g.conv2d(up, wt, None, 2, false).unwrap();
            assert_eq!(g.shape(down), &[2, h, w]);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let x = randn(&[1, 4, 4], 11);
        let w = randn(&[2, 1, 3, 3], 12);
        let b = randn(&[2], 13);
        let worst = grad_check(&[x, w, b], 1e-3, |g, ids| {
            let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 2, false).unwrap();
            g.sum(y)
        });
        assert!(worst < 1e-3, "max relative error {worst}");
    }

    #[test]
    fn transposed_conv_gradients_match_finite_differences() {
        let x = randn(&[2, 3, 3], 21);
        let w = randn(&[1, 2, 3, 3], 22);
        let b = randn(&[1], 23);
        let worst = grad_check(&[x, w, b], 1e-3, |g, ids| {
            let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 2, true).unwrap();
            let sq = g.square(y);
            g.sum(sq)
        });
        assert!(worst < 1e-3, "max relative error {worst}");
    }

    #[test]
    fn gdn_diagonal_free_cases() {
        let x = randn(&[3, 2, 2], 31);
        let mut g = Graph::new();
        let xi = g.leaf(&x);
        let beta4 = g.constant(&[3], 4.0);
        let gamma0 = g.constant(&[3, 3], 0.0);
        let y = gdn(&mut g, xi, beta4, gamma0, false).unwrap();
        for (o, i) in g.value(y).iter().zip(x.data()) {
            assert!((o - i / 2.0).abs() < 1e-12);
        }
        let z = gdn(&mut g, xi, beta4, gamma0, true).unwrap();
        for (o, i) in g.value(z).iter().zip(x.data()) {
            assert!((o - i * 2.0).abs() < 1e-12);
        }
        // igdn(gdn(x)) == x
        let back = gdn(&mut g, y, beta4, gamma0, true).unwrap();
        for (o, i) in g.value(back).iter().zip(x.data()) {
            assert!((o - i).abs() < 1e-12);
        }
        // beta = 1, gamma = 0 is the identity both ways
        let beta1 = g.constant(&[3], 1.0);
        let id1 = gdn(&mut g, xi, beta1, gamma0, false).unwrap();
        let id2 = gdn(&mut g, xi, beta1, gamma0, true).unwrap();
        assert_eq!(g.value(id1), x.data());
        assert_eq!(g.value(id2), x.data());
    }

    #[test]
    fn gdn_gradients_match_finite_differences() {
        let x = randn(&[2, 3, 3], 41);
        let beta = Tensor::new(vec![2], vec![0.8, 1.3]).unwrap();
        let gamma = Tensor::new(vec![2, 2], vec![0.2, 0.05, 0.08, 0.3]).unwrap();
        for inverse in [false, true] {
            let worst = grad_check(&[x.clone(), beta.clone(), gamma.clone()], 1e-3, |g, ids| {
                let y = gdn(g, ids[0], ids[1], ids[2], inverse).unwrap();
                let sq = g.square(y);
                g.sum(sq)
            });
            assert!(worst < 1e-3, "inverse={inverse} max relative error {worst}");
        }
    }

    #[test]
    fn unary_op_gradients_match_finite_differences() {
        // Offset away from the relu/abs kinks and keep sqrt/ln/pow positive.
        let x = {
            let mut t = randn(&[12], 51);
            for v in t.data_mut() {
                *v = v.abs() + 0.3;
            }
            t
        };
        let cases: Vec<(&str, Box<dyn Fn(&mut Graph, NodeId) -> NodeId>)> = vec![
            ("relu", Box::new(|g, x| g.relu(x))),
            ("tanh", Box::new(|g, x| g.tanh(x))),
            ("sigmoid", Box::new(|g, x| g.sigmoid(x))),
            ("softplus", Box::new(|g, x| g.softplus(x))),
            ("exp", Box::new(|g, x| g.exp(x))),
            ("ln", Box::new(|g, x| g.ln(x))),
            ("sqrt", Box::new(|g, x| g.sqrt(x))),
            ("square", Box::new(|g, x| g.square(x))),
            ("abs", Box::new(|g, x| g.abs(x))),
            ("normal_cdf", Box::new(|g, x| g.normal_cdf(x))),
            ("pow", Box::new(|g, x| g.pow_scalar(x, 1.7))),
            ("clamp", Box::new(|g, x| g.clamp(x, -10.0, 10.0))),
        ];
        for (name, f) in cases {
            let worst = grad_check(&[x.clone()], 1e-3, |g, ids| {
                let y = f(g, ids[0]);
                let s = g.sum(y);
                g.square(s)
            });
            assert!(worst < 1e-3, "{name}: max relative error {worst}");
        }
    }

    #[test]
    fn binary_and_chan_op_gradients() {
        let a = randn(&[2, 3, 4], 61);
        let b = {
            let mut t = randn(&[2, 3, 4], 62);
            for v in t.data_mut() {
                *v = v.abs() + 0.5;
            }
            t
        };
        let worst = grad_check(&[a.clone(), b.clone()], 1e-3, |g, ids| {
            let m = g.mul(ids[0], ids[1]);
            let d = g.div(m, ids[1]);
            let s = g.sub(d, ids[0]);
            let t = g.add(s, ids[1]);
            let mn = g.mean(t);
            g.square(mn)
        });
        assert!(worst < 1e-3, "elementwise: {worst}");

        let w = randn(&[2, 3, 3], 63);
        let v = randn(&[2, 3], 64);
        let worst = grad_check(&[w, a.clone(), v], 1e-3, |g, ids| {
            let y = g.chan_matvec(ids[0], ids[1]);
            let y = g.add_chan_vec(y, ids[2]);
            let y = g.mul_chan_vec(y, ids[2]);
            let s = g.sum(y);
            g.square(s)
        });
        assert!(worst < 1e-3, "chan ops: {worst}");
    }

    #[test]
    fn pool_and_depthwise_gradients() {
        let x = randn(&[2, 6, 6], 71);
        let kernel: Vec<f64> = vec![0.05, 0.1, 0.05, 0.1, 0.4, 0.1, 0.05, 0.1, 0.05];
        let worst = grad_check(&[x], 1e-3, |g, ids| {
            let p = g.avg_pool2(ids[0]);
            let c = g.depthwise_conv_valid(p, &kernel);
            let sq = g.square(c);
            g.sum(sq)
        });
        assert!(worst < 1e-3, "pool/depthwise: {worst}");
    }

    #[test]
    fn uniform_noise_contract() {
        let x = randn(&[1000], 81);
        let mut g = Graph::new();
        let xi = g.var(&x);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noisy = g.add_uniform_noise(xi, &mut rng);
        for (n, v) in g.value(noisy).iter().zip(x.data()) {
            assert!((n - v).abs() <= 0.5);
        }
        // same seed, same realization
        let mut g2 = Graph::new();
        let xi2 = g2.leaf(&x);
        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        let noisy2 = g2.add_uniform_noise(xi2, &mut rng2);
        assert_eq!(g.value(noisy), g2.value(noisy2));
        // gradient passes through unchanged
        let loss = g.sum(noisy);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(xi).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn uniform_noise_is_centered() {
        let x = Tensor::zeros(&[1_000_000]);
        let mut g = Graph::new();
        let xi = g.leaf(&x);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let noisy = g.add_uniform_noise(xi, &mut rng);
        let mean = g.value(noisy).iter().sum::<f64>() / 1e6;
        // stderr of the mean of U[-0.5,0.5] over 1e6 samples
        let stderr = (1.0 / 12.0f64).sqrt() / 1000.0;
        assert!(mean.abs() < 3.0 * stderr, "mean {mean} vs stderr {stderr}");
    }

    #[test]
    fn params_bind_and_collect() {
        let mut params = Params::new();
        let p = params.add("w", Tensor::full(&[3], 2.0));
        let mut g = Graph::new();
        let pid = g.param(&params, p);
        let sq = g.square(pid);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(g.bindings(), &[(p, pid)]);
        assert_eq!(grads.get(pid).unwrap(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn forward_stays_finite_with_reparameterized_gdn() {
        let x = randn(&[4, 8, 8], 91);
        let mut g = Graph::new();
        let xi = g.leaf(&x);
        let braw = g.var(&randn(&[4], 92));
        let graw = g.var(&randn(&[4, 4], 93));
        let bsq = g.square(braw);
        let beta = g.add_scalar(bsq, 1e-6);
        let gamma = g.square(graw);
        let y = gdn(&mut g, xi, beta, gamma, false).unwrap();
        let z = gdn(&mut g, y, beta, gamma, true).unwrap();
        assert!(g.assert_finite(z).is_ok());
        assert!(g.all_finite());
    }
}
