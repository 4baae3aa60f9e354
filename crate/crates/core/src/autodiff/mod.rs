//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! The engine is a Wengert tape: every operation appends a node holding its
//! result and the ids of its operands. [`Tape::backward`] replays the recorded
//! operations once, in reverse order, accumulating gradients into every node
//! that (transitively) depends on a gradient-requiring leaf.
//!
//! Conventions:
//! * Image-like tensors are `[N, C, H, W]`, row-major.
//! * `conv2d` is cross-correlation (no kernel flip) with zero padding.
//! * A tape is built for one forward/backward episode and then discarded;
//!   `backward` may be called once per tape.

mod conv;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub(crate) use conv::{Conv2dDims, ConvT2dDims};

/// Errors produced by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape {shape:?} implies {expected} elements, got {actual}")]
    ShapeDataMismatch { op: &'static str, shape: Vec<usize>, expected: usize, actual: usize },
    #[error("{op}: expected rank-{expected} tensor, got shape {shape:?}")]
    RankMismatch { op: &'static str, expected: usize, shape: Vec<usize> },
    #[error("{op}: {what} mismatch: left {left:?} vs right {right:?}")]
    DimMismatch { op: &'static str, what: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: kernel {kernel} exceeds padded input extent {extent} along {axis}")]
    KernelTooLarge { op: &'static str, axis: char, kernel: usize, extent: usize },
    #[error("{op}: stride must be >= 1")]
    ZeroStride { op: &'static str },
    #[error("{op}: dimension {axis} must be positive, shape {shape:?}")]
    EmptyDim { op: &'static str, axis: usize, shape: Vec<usize> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward already ran on this tape")]
    BackwardTwice,
    #[error("non-finite value produced by {op} (tape node {node}, element {index})")]
    NonFinite { op: &'static str, node: usize, index: usize },
}

fn first_nonfinite(data: &[f64]) -> Option<usize> {
    data.iter().position(|v| !v.is_finite())
}

/// A dense tensor. Values are finite by construction; gradients are attached
/// by [`Tape::backward`] and are `None` until then.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
    #[serde(default)]
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor, validating element count, positive dimensions and
    /// finiteness of every value.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if let Some(axis) = shape.iter().position(|&d| d == 0) {
            return Err(TensorError::EmptyDim { op: "tensor", axis, shape });
        }
        if data.len() != expected {
            return Err(TensorError::ShapeDataMismatch {
                op: "tensor",
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some(index) = first_nonfinite(&data) {
            return Err(TensorError::NonFinite { op: "tensor", node: usize::MAX, index });
        }
        Ok(Tensor { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], grad: None, requires_grad: false }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self, TensorError> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n])
    }

    /// A rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Result<Self, TensorError> {
        Tensor::new(vec![], vec![value])
    }

    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad_flag(&self) -> bool {
        self.requires_grad
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// The single value of a rank-0 / one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() called on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Re-validates an externally produced tensor (e.g. after deserialization).
    pub fn validate(&self) -> Result<(), TensorError> {
        let expected: usize = self.shape.iter().product();
        if self.data.len() != expected {
            return Err(TensorError::ShapeDataMismatch {
                op: "tensor",
                shape: self.shape.clone(),
                expected,
                actual: self.data.len(),
            });
        }
        if let Some(index) = first_nonfinite(&self.data) {
            return Err(TensorError::NonFinite { op: "tensor", node: usize::MAX, index });
        }
        Ok(())
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    AddScalar { a: usize },
    Relu { a: usize },
    Tanh { a: usize },
    Recip { a: usize },
    Mean { a: usize },
    Sum { a: usize },
    MulScalarTensor { a: usize, s: usize },
    L1Distance { a: usize, b: usize },
    InstanceNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    Conv2d { input: usize, weight: usize, bias: Option<usize>, dims: Conv2dDims },
    ConvTranspose2d { input: usize, weight: usize, dims: ConvT2dDims },
    /// Depthwise valid convolution with a fixed (non-trainable) kernel.
    FixedSmooth { input: usize, kh: usize, kw: usize, coeffs: Vec<f64> },
    /// x2 zero-order-hold resize with per-phase gains and a replicated border.
    ZohUpsample { input: usize, gains: [f64; 4], pad: [usize; 4] },
    Crop2d { input: usize, top: usize, left: usize },
    /// Symmetric reflection padding (border samples not repeated).
    ReflectPad2d { input: usize, pad: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records forward operations and replays them in reverse for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Its `requires_grad` flag decides whether
    /// `backward` will leave a gradient on it.
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        let needs = t.requires_grad;
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: needs });
        TensorId(self.nodes.len() - 1)
    }

    /// Registers a constant input (never receives a gradient).
    pub fn constant(&mut self, t: Tensor) -> TensorId {
        self.leaf(t.requires_grad(false))
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].value.data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    /// Value of a one-element tensor on the tape.
    pub fn scalar_value(&self, id: TensorId) -> f64 {
        self.nodes[id.0].value.item()
    }

    fn push(
        &mut self,
        op_name: &'static str,
        op: Op,
        shape: Vec<usize>,
        data: Vec<f64>,
        needs_grad: bool,
    ) -> Result<TensorId, TensorError> {
        if let Some(index) = first_nonfinite(&data) {
            return Err(TensorError::NonFinite { op: op_name, node: self.nodes.len(), index });
        }
        let value = Tensor { shape, data, grad: None, requires_grad: false };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(TensorId(self.nodes.len() - 1))
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn check_same_shape(
        &self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::DimMismatch {
                op,
                what: "operand shapes",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ── elementwise and reductions ──────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape("add", a, b)?;
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let needs = self.needs(a) || self.needs(b);
        self.push("add", Op::Add { a: a.0, b: b.0 }, self.shape(a).to_vec(), data, needs)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape("sub", a, b)?;
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let needs = self.needs(a) || self.needs(b);
        self.push("sub", Op::Sub { a: a.0, b: b.0 }, self.shape(a).to_vec(), data, needs)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape("mul", a, b)?;
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let needs = self.needs(a) || self.needs(b);
        self.push("mul", Op::Mul { a: a.0, b: b.0 }, self.shape(a).to_vec(), data, needs)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId, TensorError> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        let needs = self.needs(a);
        self.push("scale", Op::Scale { a: a.0, c }, self.shape(a).to_vec(), data, needs)
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> Result<TensorId, TensorError> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x + c).collect();
        let needs = self.needs(a);
        self.push("add_scalar", Op::AddScalar { a: a.0 }, self.shape(a).to_vec(), data, needs)
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let data: Vec<f64> = self.data(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let needs = self.needs(a);
        self.push("relu", Op::Relu { a: a.0 }, self.shape(a).to_vec(), data, needs)
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x.tanh()).collect();
        let needs = self.needs(a);
        self.push("tanh", Op::Tanh { a: a.0 }, self.shape(a).to_vec(), data, needs)
    }

    /// Elementwise reciprocal. Values near zero surface as a non-finite error.
    pub fn recip(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let data: Vec<f64> = self.data(a).iter().map(|x| 1.0 / x).collect();
        let needs = self.needs(a);
        self.push("recip", Op::Recip { a: a.0 }, self.shape(a).to_vec(), data, needs)
    }

    /// Mean over all elements, producing a rank-0 tensor.
    pub fn mean(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let n = self.data(a).len() as f64;
        let s: f64 = self.data(a).iter().sum();
        let needs = self.needs(a);
        self.push("mean", Op::Mean { a: a.0 }, vec![], vec![s / n], needs)
    }

    /// Sum over all elements, producing a rank-0 tensor.
    pub fn sum(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let s: f64 = self.data(a).iter().sum();
        let needs = self.needs(a);
        self.push("sum", Op::Sum { a: a.0 }, vec![], vec![s], needs)
    }

    /// Broadcast-multiplies `a` by a one-element tensor `s`.
    pub fn mul_scalar_tensor(&mut self, a: TensorId, s: TensorId) -> Result<TensorId, TensorError> {
        if self.value(s).numel() != 1 {
            return Err(TensorError::Invalid {
                op: "mul_scalar_tensor",
                msg: format!("scale operand must hold one element, got shape {:?}", self.shape(s)),
            });
        }
        let sv = self.data(s)[0];
        let data: Vec<f64> = self.data(a).iter().map(|x| x * sv).collect();
        let needs = self.needs(a) || self.needs(s);
        self.push(
            "mul_scalar_tensor",
            Op::MulScalarTensor { a: a.0, s: s.0 },
            self.shape(a).to_vec(),
            data,
            needs,
        )
    }

    /// Mean absolute difference between two same-shape tensors (rank-0 output).
    pub fn l1_distance(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape("l1_distance", a, b)?;
        let n = self.data(a).len() as f64;
        let s: f64 = self.data(a).iter().zip(self.data(b)).map(|(x, y)| (x - y).abs()).sum();
        let needs = self.needs(a) || self.needs(b);
        self.push("l1_distance", Op::L1Distance { a: a.0, b: b.0 }, vec![], vec![s / n], needs)
    }

    // ── normalization ───────────────────────────────────────────────────

    /// Instance normalization over each `(n, c)` spatial slice with per-channel
    /// affine parameters. Requires `H*W >= 2`.
    pub fn instance_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(TensorError::RankMismatch { op: "instance_norm", expected: 4, shape });
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if h * w < 2 {
            return Err(TensorError::Invalid {
                op: "instance_norm",
                msg: format!("spatial extent H*W must be >= 2, got {}x{}", h, w),
            });
        }
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(id) != [c] {
                return Err(TensorError::DimMismatch {
                    op: "instance_norm",
                    what: if name == "gamma" { "gamma vs channels" } else { "beta vs channels" },
                    left: self.shape(id).to_vec(),
                    right: vec![c],
                });
            }
        }
        let m = h * w;
        let mut out = vec![0.0; n * c * m];
        {
            let xd = self.data(x);
            let g = self.data(gamma);
            let b = self.data(beta);
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * m;
                    let slice = &xd[base..base + m];
                    let mean = slice.iter().sum::<f64>() / m as f64;
                    let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let (gc, bc) = (g[ci], b[ci]);
                    for (o, v) in out[base..base + m].iter_mut().zip(slice) {
                        *o = gc * ((v - mean) * inv) + bc;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            "instance_norm",
            Op::InstanceNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps },
            shape,
            out,
            needs,
        )
    }

    // ── convolutions and resampling ─────────────────────────────────────

    /// 2-D cross-correlation with zero padding.
    ///
    /// `input` is `[N, Ci, H, W]`, `weight` is `[Co, Ci, Kh, Kw]`, the output
    /// spatial extent is `floor((H + 2*pad - Kh)/stride) + 1` (same for W).
    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId, TensorError> {
        let dims = self.conv2d_dims(input, weight, bias, stride, pad)?;
        let mut out = vec![0.0; dims.n * dims.co * dims.oh * dims.ow];
        conv::conv2d_forward(
            self.data(input),
            self.data(weight),
            bias.map(|b| self.data(b)),
            &dims,
            &mut out,
        );
        let needs = self.needs(input)
            || self.needs(weight)
            || bias.map(|b| self.needs(b)).unwrap_or(false);
        self.push(
            "conv2d",
            Op::Conv2d { input: input.0, weight: weight.0, bias: bias.map(|b| b.0), dims: dims.clone() },
            vec![dims.n, dims.co, dims.oh, dims.ow],
            out,
            needs,
        )
    }

    fn conv2d_dims(
        &self,
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<Conv2dDims, TensorError> {
        let ishape = self.shape(input);
        if ishape.len() != 4 {
            return Err(TensorError::RankMismatch { op: "conv2d", expected: 4, shape: ishape.to_vec() });
        }
        let wshape = self.shape(weight);
        if wshape.len() != 4 {
            return Err(TensorError::RankMismatch { op: "conv2d", expected: 4, shape: wshape.to_vec() });
        }
        if stride == 0 {
            return Err(TensorError::ZeroStride { op: "conv2d" });
        }
        let (n, ci, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (co, wci, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        if ci != wci {
            return Err(TensorError::DimMismatch {
                op: "conv2d",
                what: "input channels vs weight in-channels",
                left: vec![ci],
                right: vec![wci],
            });
        }
        if h + 2 * pad < kh {
            return Err(TensorError::KernelTooLarge { op: "conv2d", axis: 'H', kernel: kh, extent: h + 2 * pad });
        }
        if w + 2 * pad < kw {
            return Err(TensorError::KernelTooLarge { op: "conv2d", axis: 'W', kernel: kw, extent: w + 2 * pad });
        }
        if let Some(b) = bias {
            if self.shape(b) != [co] {
                return Err(TensorError::DimMismatch {
                    op: "conv2d",
                    what: "bias vs out-channels",
                    left: self.shape(b).to_vec(),
                    right: vec![co],
                });
            }
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(Conv2dDims { n, ci, h, w, co, kh, kw, stride, pad, oh, ow })
    }

    /// Transposed 2-D convolution (the adjoint of an unpadded strided
    /// `conv2d`): each input pixel scatters a weighted kernel into the output.
    ///
    /// `input` is `[N, Ci, H, W]`, `weight` is `[Ci, Co, Kh, Kw]`, the output
    /// spatial extent is `(H - 1)*stride + Kh` (same for W).
    pub fn conv2d_transposed(
        &mut self,
        input: TensorId,
        weight: TensorId,
        stride: usize,
    ) -> Result<TensorId, TensorError> {
        let ishape = self.shape(input);
        if ishape.len() != 4 {
            return Err(TensorError::RankMismatch { op: "conv2d_transposed", expected: 4, shape: ishape.to_vec() });
        }
        let wshape = self.shape(weight);
        if wshape.len() != 4 {
            return Err(TensorError::RankMismatch { op: "conv2d_transposed", expected: 4, shape: wshape.to_vec() });
        }
        if stride == 0 {
            return Err(TensorError::ZeroStride { op: "conv2d_transposed" });
        }
        let (n, ci, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (wci, co, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        if ci != wci {
            return Err(TensorError::DimMismatch {
                op: "conv2d_transposed",
                what: "input channels vs weight in-channels",
                left: vec![ci],
                right: vec![wci],
            });
        }
        let oh = (h - 1) * stride + kh;
        let ow = (w - 1) * stride + kw;
        let dims = ConvT2dDims { n, ci, h, w, co, kh, kw, stride, oh, ow };
        let mut out = vec![0.0; n * co * oh * ow];
        conv::convt2d_forward(self.data(input), self.data(weight), &dims, &mut out);
        let needs = self.needs(input) || self.needs(weight);
        self.push(
            "conv2d_transposed",
            Op::ConvTranspose2d { input: input.0, weight: weight.0, dims: dims.clone() },
            vec![n, co, oh, ow],
            out,
            needs,
        )
    }

    /// Depthwise valid convolution with a fixed kernel shared by all channels.
    /// The kernel is part of the operation, not a tensor, so it never receives
    /// a gradient. Output extent is `H - Kh + 1` by `W - Kw + 1`.
    pub fn fixed_smooth2d(
        &mut self,
        input: TensorId,
        kh: usize,
        kw: usize,
        coeffs: &[f64],
    ) -> Result<TensorId, TensorError> {
        let ishape = self.shape(input).to_vec();
        if ishape.len() != 4 {
            return Err(TensorError::RankMismatch { op: "fixed_smooth2d", expected: 4, shape: ishape });
        }
        if coeffs.len() != kh * kw {
            return Err(TensorError::ShapeDataMismatch {
                op: "fixed_smooth2d",
                shape: vec![kh, kw],
                expected: kh * kw,
                actual: coeffs.len(),
            });
        }
        let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        if h < kh {
            return Err(TensorError::KernelTooLarge { op: "fixed_smooth2d", axis: 'H', kernel: kh, extent: h });
        }
        if w < kw {
            return Err(TensorError::KernelTooLarge { op: "fixed_smooth2d", axis: 'W', kernel: kw, extent: w });
        }
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let mut out = vec![0.0; n * c * oh * ow];
        {
            let x = self.data(input);
            for nc in 0..n * c {
                let xp = &x[nc * h * w..(nc + 1) * h * w];
                let op_ = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let cv = coeffs[ky * kw + kx];
                        for oy in 0..oh {
                            let xrow = &xp[(oy + ky) * w + kx..(oy + ky) * w + kx + ow];
                            let orow = &mut op_[oy * ow..(oy + 1) * ow];
                            for (o, v) in orow.iter_mut().zip(xrow) {
                                *o += cv * v;
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(input);
        self.push(
            "fixed_smooth2d",
            Op::FixedSmooth { input: input.0, kh, kw, coeffs: coeffs.to_vec() },
            vec![n, c, oh, ow],
            out,
            needs,
        )
    }

    /// x2 zero-order-hold resize: pixel `(i, j)` expands into a 2x2 block
    /// scaled by per-phase `gains` (all 1 for plain duplication), and the
    /// result is padded by `pad = [top, bottom, left, right]` with replicated
    /// edge values. Output extent is `2H + top + bottom` by `2W + left + right`.
    pub fn zoh_upsample2x(
        &mut self,
        input: TensorId,
        gains: [f64; 4],
        pad: [usize; 4],
    ) -> Result<TensorId, TensorError> {
        let ishape = self.shape(input).to_vec();
        if ishape.len() != 4 {
            return Err(TensorError::RankMismatch { op: "zoh_upsample2x", expected: 4, shape: ishape });
        }
        let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (pt, pb, pl, pr) = (pad[0], pad[1], pad[2], pad[3]);
        let (oh, ow) = (2 * h + pt + pb, 2 * w + pl + pr);
        let mut out = vec![0.0; n * c * oh * ow];
        {
            let x = self.data(input);
            for nc in 0..n * c {
                let xp = &x[nc * h * w..(nc + 1) * h * w];
                let op_ = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
                for oy in 0..oh {
                    let cy = (oy.max(pt) - pt).min(2 * h - 1);
                    let (iy, u) = (cy / 2, cy % 2);
                    let xrow = &xp[iy * w..(iy + 1) * w];
                    let orow = &mut op_[oy * ow..(oy + 1) * ow];
                    for (ox, o) in orow.iter_mut().enumerate() {
                        let cx = (ox.max(pl) - pl).min(2 * w - 1);
                        let (ix, v) = (cx / 2, cx % 2);
                        *o = gains[u * 2 + v] * xrow[ix];
                    }
                }
            }
        }
        let needs = self.needs(input);
        self.push(
            "zoh_upsample2x",
            Op::ZohUpsample { input: input.0, gains, pad },
            vec![n, c, oh, ow],
            out,
            needs,
        )
    }

    /// Spatial crop: keeps an `out_h` x `out_w` window starting at
    /// `(top, left)`.
    pub fn crop2d(
        &mut self,
        input: TensorId,
        top: usize,
        left: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<TensorId, TensorError> {
        let ishape = self.shape(input).to_vec();
        if ishape.len() != 4 {
            return Err(TensorError::RankMismatch { op: "crop2d", expected: 4, shape: ishape });
        }
        let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        if top + out_h > h || left + out_w > w {
            return Err(TensorError::Invalid {
                op: "crop2d",
                msg: format!(
                    "window {}x{} at ({}, {}) exceeds input {}x{}",
                    out_h, out_w, top, left, h, w
                ),
            });
        }
        let mut out = vec![0.0; n * c * out_h * out_w];
        {
            let x = self.data(input);
            for nc in 0..n * c {
                let xp = &x[nc * h * w..(nc + 1) * h * w];
                let op_ = &mut out[nc * out_h * out_w..(nc + 1) * out_h * out_w];
                for oy in 0..out_h {
                    let src = &xp[(top + oy) * w + left..(top + oy) * w + left + out_w];
                    op_[oy * out_w..(oy + 1) * out_w].copy_from_slice(src);
                }
            }
        }
        let needs = self.needs(input);
        self.push(
            "crop2d",
            Op::Crop2d { input: input.0, top, left },
            vec![n, c, out_h, out_w],
            out,
            needs,
        )
    }

    /// Pads all four spatial borders by `pad` samples using reflection
    /// without edge repetition: row `-1` mirrors row `1`, row `h` mirrors
    /// row `h - 2`. Reflection maps constants to constants, which zero
    /// padding does not.
    pub fn reflect_pad2d(&mut self, input: TensorId, pad: usize) -> Result<TensorId, TensorError> {
        let ishape = self.shape(input).to_vec();
        if ishape.len() != 4 {
            return Err(TensorError::RankMismatch { op: "reflect_pad2d", expected: 4, shape: ishape });
        }
        let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        if pad >= h || pad >= w {
            return Err(TensorError::Invalid {
                op: "reflect_pad2d",
                msg: format!("pad {pad} needs at least {}x{} input, got {h}x{w}", pad + 1, pad + 1),
            });
        }
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        let reflect = |p: usize, limit: usize| -> usize {
            // p is an output coordinate; the source is |p - pad| mirrored
            // back inside [0, limit)
            let q = p as isize - pad as isize;
            let q = if q < 0 { -q } else { q } as usize;
            if q >= limit { 2 * limit - 2 - q } else { q }
        };
        let mut out = vec![0.0; n * c * oh * ow];
        {
            let x = self.data(input);
            for nc in 0..n * c {
                let xp = &x[nc * h * w..(nc + 1) * h * w];
                let op_ = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
                for oy in 0..oh {
                    let sy = reflect(oy, h);
                    for ox in 0..ow {
                        op_[oy * ow + ox] = xp[sy * w + reflect(ox, w)];
                    }
                }
            }
        }
        let needs = self.needs(input);
        self.push(
            "reflect_pad2d",
            Op::ReflectPad2d { input: input.0, pad },
            vec![n, c, oh, ow],
            out,
            needs,
        )
    }

    // ── backward ────────────────────────────────────────────────────────

    fn add_to_grad(&mut self, idx: usize, contrib: &[f64]) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        let n = self.nodes[idx].value.data.len();
        let g = self.nodes[idx].value.grad.get_or_insert_with(|| vec![0.0; n]);
        for (gi, ci) in g.iter_mut().zip(contrib) {
            *gi += ci;
        }
    }

    /// Reverse pass from a scalar loss. Every recorded operation is visited at
    /// most once, in reverse order; leaves registered with `requires_grad`
    /// end up with `grad(id) == Some(..)` if the loss depends on them.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        self.backward_done = true;
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss { shape: self.nodes[loss.0].value.shape.clone() });
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(()); // loss does not depend on any gradient-requiring leaf
        }
        self.nodes[loss.0].value.grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].value.grad.clone() else { continue };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add { a, b } => {
                    self.add_to_grad(a, &g);
                    self.add_to_grad(b, &g);
                }
                Op::Sub { a, b } => {
                    self.add_to_grad(a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.add_to_grad(b, &neg);
                }
                Op::Mul { a, b } => {
                    if self.nodes[a].needs_grad {
                        let da: Vec<f64> =
                            g.iter().zip(&self.nodes[b].value.data).map(|(gv, bv)| gv * bv).collect();
                        self.add_to_grad(a, &da);
                    }
                    if self.nodes[b].needs_grad {
                        let db: Vec<f64> =
                            g.iter().zip(&self.nodes[a].value.data).map(|(gv, av)| gv * av).collect();
                        self.add_to_grad(b, &db);
                    }
                }
                Op::Scale { a, c } => {
                    let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                    self.add_to_grad(a, &da);
                }
                Op::AddScalar { a } => {
                    self.add_to_grad(a, &g);
                }
                Op::Relu { a } => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a].value.data)
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    self.add_to_grad(a, &da);
                }
                Op::Tanh { a } => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[i].value.data)
                        .map(|(gv, y)| gv * (1.0 - y * y))
                        .collect();
                    self.add_to_grad(a, &da);
                }
                Op::Recip { a } => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[i].value.data)
                        .map(|(gv, y)| -gv * y * y)
                        .collect();
                    self.add_to_grad(a, &da);
                }
                Op::Mean { a } => {
                    let n = self.nodes[a].value.data.len() as f64;
                    let da = vec![g[0] / n; self.nodes[a].value.data.len()];
                    self.add_to_grad(a, &da);
                }
                Op::Sum { a } => {
                    let da = vec![g[0]; self.nodes[a].value.data.len()];
                    self.add_to_grad(a, &da);
                }
                Op::MulScalarTensor { a, s } => {
                    if self.nodes[a].needs_grad {
                        let sv = self.nodes[s].value.data[0];
                        let da: Vec<f64> = g.iter().map(|gv| gv * sv).collect();
                        self.add_to_grad(a, &da);
                    }
                    if self.nodes[s].needs_grad {
                        let ds: f64 =
                            g.iter().zip(&self.nodes[a].value.data).map(|(gv, av)| gv * av).sum();
                        self.add_to_grad(s, &[ds]);
                    }
                }
                Op::L1Distance { a, b } => {
                    let n = self.nodes[a].value.data.len() as f64;
                    let scale = g[0] / n;
                    let mut da = vec![0.0; self.nodes[a].value.data.len()];
                    for ((d, x), y) in
                        da.iter_mut().zip(&self.nodes[a].value.data).zip(&self.nodes[b].value.data)
                    {
                        *d = scale * (x - y).signum() * if x == y { 0.0 } else { 1.0 };
                    }
                    if self.nodes[a].needs_grad {
                        self.add_to_grad(a, &da);
                    }
                    if self.nodes[b].needs_grad {
                        let db: Vec<f64> = da.iter().map(|v| -v).collect();
                        self.add_to_grad(b, &db);
                    }
                }
                Op::InstanceNorm { x, gamma, beta, eps } => {
                    self.instance_norm_backward(i, x, gamma, beta, eps, &g);
                }
                Op::Conv2d { input, weight, bias, dims } => {
                    if self.nodes[input].needs_grad {
                        let mut gin = vec![0.0; self.nodes[input].value.data.len()];
                        conv::conv2d_grad_input(&g, &self.nodes[weight].value.data, &dims, &mut gin);
                        self.add_to_grad(input, &gin);
                    }
                    if self.nodes[weight].needs_grad {
                        let mut gw = vec![0.0; self.nodes[weight].value.data.len()];
                        conv::conv2d_grad_weight(&g, &self.nodes[input].value.data, &dims, &mut gw);
                        self.add_to_grad(weight, &gw);
                    }
                    if let Some(b) = bias {
                        if self.nodes[b].needs_grad {
                            let mut gb = vec![0.0; self.nodes[b].value.data.len()];
                            conv::conv2d_grad_bias(&g, &dims, &mut gb);
                            self.add_to_grad(b, &gb);
                        }
                    }
                }
                Op::ConvTranspose2d { input, weight, dims } => {
                    if self.nodes[input].needs_grad {
                        let mut gin = vec![0.0; self.nodes[input].value.data.len()];
                        conv::convt2d_grad_input(&g, &self.nodes[weight].value.data, &dims, &mut gin);
                        self.add_to_grad(input, &gin);
                    }
                    if self.nodes[weight].needs_grad {
                        let mut gw = vec![0.0; self.nodes[weight].value.data.len()];
                        conv::convt2d_grad_weight(&g, &self.nodes[input].value.data, &dims, &mut gw);
                        self.add_to_grad(weight, &gw);
                    }
                }
                Op::FixedSmooth { input, kh, kw, coeffs } => {
                    let ishape = self.nodes[input].value.shape.clone();
                    let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
                    let (oh, ow) = (h - kh + 1, w - kw + 1);
                    let mut gin = vec![0.0; n * c * h * w];
                    for nc in 0..n * c {
                        let gp = &g[nc * oh * ow..(nc + 1) * oh * ow];
                        let gi = &mut gin[nc * h * w..(nc + 1) * h * w];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let cv = coeffs[ky * kw + kx];
                                for oy in 0..oh {
                                    let grow = &gp[oy * ow..(oy + 1) * ow];
                                    let irow = &mut gi[(oy + ky) * w + kx..(oy + ky) * w + kx + ow];
                                    for (iv, gv) in irow.iter_mut().zip(grow) {
                                        *iv += cv * gv;
                                    }
                                }
                            }
                        }
                    }
                    self.add_to_grad(input, &gin);
                }
                Op::ZohUpsample { input, gains, pad } => {
                    let ishape = self.nodes[input].value.shape.clone();
                    let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
                    let (pt, _pb, pl, _pr) = (pad[0], pad[1], pad[2], pad[3]);
                    let oshape = self.nodes[i].value.shape.clone();
                    let (oh, ow) = (oshape[2], oshape[3]);
                    let mut gin = vec![0.0; n * c * h * w];
                    for nc in 0..n * c {
                        let gp = &g[nc * oh * ow..(nc + 1) * oh * ow];
                        let gi = &mut gin[nc * h * w..(nc + 1) * h * w];
                        for oy in 0..oh {
                            let cy = (oy.max(pt) - pt).min(2 * h - 1);
                            let (iy, u) = (cy / 2, cy % 2);
                            let grow = &gp[oy * ow..(oy + 1) * ow];
                            for (ox, gv) in grow.iter().enumerate() {
                                let cx = (ox.max(pl) - pl).min(2 * w - 1);
                                let (ix, v) = (cx / 2, cx % 2);
                                gi[iy * w + ix] += gains[u * 2 + v] * gv;
                            }
                        }
                    }
                    self.add_to_grad(input, &gin);
                }
                Op::Crop2d { input, top, left } => {
                    let ishape = self.nodes[input].value.shape.clone();
                    let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
                    let oshape = self.nodes[i].value.shape.clone();
                    let (out_h, out_w) = (oshape[2], oshape[3]);
                    let mut gin = vec![0.0; n * c * h * w];
                    for nc in 0..n * c {
                        let gp = &g[nc * out_h * out_w..(nc + 1) * out_h * out_w];
                        let gi = &mut gin[nc * h * w..(nc + 1) * h * w];
                        for oy in 0..out_h {
                            let dst = &mut gi[(top + oy) * w + left..(top + oy) * w + left + out_w];
                            for (d, gv) in dst.iter_mut().zip(&gp[oy * out_w..(oy + 1) * out_w]) {
                                *d += gv;
                            }
                        }
                    }
                    self.add_to_grad(input, &gin);
                }
                Op::ReflectPad2d { input, pad } => {
                    let ishape = self.nodes[input].value.shape.clone();
                    let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
                    let (oh, ow) = (h + 2 * pad, w + 2 * pad);
                    let reflect = |p: usize, limit: usize| -> usize {
                        let q = p as isize - pad as isize;
                        let q = if q < 0 { -q } else { q } as usize;
                        if q >= limit { 2 * limit - 2 - q } else { q }
                    };
                    let mut gin = vec![0.0; n * c * h * w];
                    for nc in 0..n * c {
                        let gp = &g[nc * oh * ow..(nc + 1) * oh * ow];
                        let gi = &mut gin[nc * h * w..(nc + 1) * h * w];
                        for oy in 0..oh {
                            let sy = reflect(oy, h);
                            for ox in 0..ow {
                                gi[sy * w + reflect(ox, w)] += gp[oy * ow + ox];
                            }
                        }
                    }
                    self.add_to_grad(input, &gin);
                }
            }
        }
        Ok(())
    }

    fn instance_norm_backward(
        &mut self,
        out_idx: usize,
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
        g: &[f64],
    ) {
        let shape = self.nodes[x].value.shape.clone();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let m = h * w;
        let mf = m as f64;
        let mut gx = vec![0.0; n * c * m];
        let mut ggamma = vec![0.0; c];
        let mut gbeta = vec![0.0; c];
        {
            let xd = &self.nodes[x].value.data;
            let gam = &self.nodes[gamma].value.data;
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * m;
                    let xs = &xd[base..base + m];
                    let gs = &g[base..base + m];
                    let mean = xs.iter().sum::<f64>() / mf;
                    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / mf;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gc = gam[ci];
                    // xhat = (x - mean) * inv; dxhat = g * gamma
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for (gv, xv) in gs.iter().zip(xs) {
                        let xhat = (xv - mean) * inv;
                        let dxhat = gv * gc;
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        ggamma[ci] += gv * xhat;
                        gbeta[ci] += gv;
                    }
                    for ((out, gv), xv) in gx[base..base + m].iter_mut().zip(gs).zip(xs) {
                        let xhat = (xv - mean) * inv;
                        let dxhat = gv * gc;
                        *out = inv / mf * (mf * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                    }
                }
            }
        }
        let _ = out_idx;
        if self.nodes[x].needs_grad {
            self.add_to_grad(x, &gx);
        }
        if self.nodes[gamma].needs_grad {
            self.add_to_grad(gamma, &ggamma);
        }
        if self.nodes[beta].needs_grad {
            self.add_to_grad(beta, &gbeta);
        }
    }
}
