//! Layer-level building blocks.
//!
//! The two resampling layers here avoid the checkerboard patterns that plain
//! strided and transposed convolutions imprint on images and gradients:
//!
//! * [`artifact_free_upsample`] resizes by zero-order hold (every pixel becomes
//!   a 2x2 block — equivalently, the fixed 2x2 smoothing kernel applied to the
//!   zero-stuffed signal with the stride² gain restored) and then applies an
//!   ordinary stride-1 trainable convolution. The 2-tap-per-axis smoother has
//!   a spectral zero at the Nyquist frequency, so the resize cannot imprint a
//!   half-sample-rate pattern, and a constant input stays exactly constant for
//!   any weight values.
//! * [`artifact_free_downsample`] first smooths with the fixed kernel (stride
//!   1, valid) and then applies a trainable stride-2 convolution. In the
//!   backward pass the smoother's adjoint averages out the period-2 pattern
//!   that the strided convolution's adjoint produces, leaving interior input
//!   gradients spatially constant under a constant upstream gradient.
//!
//! The fixed kernels are plain operation data — they are never registered as
//! parameters and never receive gradient updates.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, TensorError, TensorId};

/// A small non-trainable smoothing kernel with coefficients summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedKernel {
    kh: usize,
    kw: usize,
    coeffs: Vec<f64>,
}

impl FixedKernel {
    /// Builds a kernel, checking that the coefficients sum to exactly 1 (so
    /// smoothing preserves constants bit-for-bit).
    pub fn new(kh: usize, kw: usize, coeffs: Vec<f64>) -> Result<Self, TensorError> {
        if coeffs.len() != kh * kw {
            return Err(TensorError::ShapeDataMismatch {
                op: "fixed_kernel",
                shape: vec![kh, kw],
                expected: kh * kw,
                actual: coeffs.len(),
            });
        }
        let sum: f64 = coeffs.iter().sum();
        if sum != 1.0 {
            return Err(TensorError::Invalid {
                op: "fixed_kernel",
                msg: format!("coefficients must sum to exactly 1, got {sum}"),
            });
        }
        Ok(FixedKernel { kh, kw, coeffs })
    }

    /// The standard choice: a 2x2 uniform average.
    pub fn uniform2x2() -> Self {
        FixedKernel { kh: 2, kw: 2, coeffs: vec![0.25; 4] }
    }

    pub fn kh(&self) -> usize {
        self.kh
    }

    pub fn kw(&self) -> usize {
        self.kw
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }
}

impl Default for FixedKernel {
    fn default() -> Self {
        FixedKernel::uniform2x2()
    }
}

/// Upsamples by 2x and applies a trainable convolution without introducing
/// checkerboard patterns.
///
/// `input` is `[N, Ci, H, W]`, `weight` is `[Co, Ci, Kh, Kw]`; the output is
/// `[N, Co, 2H, 2W]`. The resize replicates its border by `(K-1)/2` pixels so
/// the following convolution runs without zero padding; every window of a
/// constant input therefore sees only the constant, making constant
/// preservation exact everywhere, boundary included.
pub fn artifact_free_upsample(
    tape: &mut Tape,
    input: TensorId,
    weight: TensorId,
    bias: Option<TensorId>,
    fixed: &FixedKernel,
) -> Result<TensorId, TensorError> {
    if (fixed.kh, fixed.kw) != (2, 2) {
        return Err(TensorError::Invalid {
            op: "artifact_free_upsample",
            msg: format!("resize requires a 2x2 fixed kernel, got {}x{}", fixed.kh, fixed.kw),
        });
    }
    let wshape = tape.shape(weight);
    if wshape.len() != 4 {
        return Err(TensorError::RankMismatch {
            op: "artifact_free_upsample",
            expected: 4,
            shape: wshape.to_vec(),
        });
    }
    let (kh, kw) = (wshape[2], wshape[3]);
    // stride² gain: zero-stuffing spreads each sample over 4 output sites,
    // so a sum-1 kernel needs a 4x gain to keep unit DC response.
    let gains = [
        4.0 * fixed.coeffs[0],
        4.0 * fixed.coeffs[1],
        4.0 * fixed.coeffs[2],
        4.0 * fixed.coeffs[3],
    ];
    let pad = [(kh - 1) / 2, kh - 1 - (kh - 1) / 2, (kw - 1) / 2, kw - 1 - (kw - 1) / 2];
    let resized = tape.zoh_upsample2x(input, gains, pad)?;
    tape.conv2d(resized, weight, bias, 1, 0)
}

/// Smooths with the fixed kernel and then applies a trainable stride-2
/// convolution.
///
/// `input` is `[N, Ci, H, W]` with `H`, `W` even; `weight` is
/// `[Co, Ci, K, K]` with `K` odd; the output is `[N, Co, H/2, W/2]`.
pub fn artifact_free_downsample(
    tape: &mut Tape,
    input: TensorId,
    weight: TensorId,
    bias: Option<TensorId>,
    fixed: &FixedKernel,
) -> Result<TensorId, TensorError> {
    let ishape = tape.shape(input);
    if ishape.len() != 4 {
        return Err(TensorError::RankMismatch {
            op: "artifact_free_downsample",
            expected: 4,
            shape: ishape.to_vec(),
        });
    }
    let (h, w) = (ishape[2], ishape[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::Invalid {
            op: "artifact_free_downsample",
            msg: format!("spatial dims must be even, got {h}x{w}"),
        });
    }
    let wshape = tape.shape(weight);
    if wshape.len() != 4 {
        return Err(TensorError::RankMismatch {
            op: "artifact_free_downsample",
            expected: 4,
            shape: wshape.to_vec(),
        });
    }
    let k = wshape[2];
    if k % 2 == 0 || wshape[3] != k {
        return Err(TensorError::Invalid {
            op: "artifact_free_downsample",
            msg: format!("trainable kernel must be square with odd extent, got {}x{}", k, wshape[3]),
        });
    }
    let smoothed = tape.fixed_smooth2d(input, fixed.kh, fixed.kw, &fixed.coeffs)?;
    tape.conv2d(smoothed, weight, bias, 2, (k - 1) / 2)
}

/// Power-iteration state for spectral weight normalization.
///
/// `u` and `v` are warm-started estimates of the leading singular vectors of
/// the weight viewed as a `rows x cols` matrix (`rows` = out-channels,
/// `cols` = the rest). One iteration per training step keeps the estimate
/// tracking the slowly-moving weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralNormState {
    u: Vec<f64>,
    v: Vec<f64>,
    n_power_iterations: usize,
}

impl SpectralNormState {
    pub fn new(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let mut u: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(rng)).collect();
        let mut v: Vec<f64> = (0..cols).map(|_| StandardNormal.sample(rng)).collect();
        normalize(&mut u);
        normalize(&mut v);
        SpectralNormState { u, v, n_power_iterations: 1 }
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    /// Runs `iters` power iterations against `w` (`rows x cols`, row-major)
    /// and returns the singular-value estimate `u^T W v`.
    pub fn power_iterate(
        &mut self,
        w: &[f64],
        rows: usize,
        cols: usize,
        iters: usize,
    ) -> Result<f64, TensorError> {
        assert_eq!(w.len(), rows * cols, "weight matrix size mismatch");
        assert_eq!(self.u.len(), rows, "u length mismatch");
        assert_eq!(self.v.len(), cols, "v length mismatch");
        for _ in 0..iters {
            // v <- normalize(W^T u)
            for j in 0..cols {
                let mut acc = 0.0;
                for i in 0..rows {
                    acc += w[i * cols + j] * self.u[i];
                }
                self.v[j] = acc;
            }
            if !normalize(&mut self.v) {
                return Err(TensorError::Invalid {
                    op: "spectral_normalize",
                    msg: "weight matrix has zero spectral norm (all-zero or degenerate)".into(),
                });
            }
            // u <- normalize(W v)
            for i in 0..rows {
                let mut acc = 0.0;
                let row = &w[i * cols..(i + 1) * cols];
                for (wv, vv) in row.iter().zip(&self.v) {
                    acc += wv * vv;
                }
                self.u[i] = acc;
            }
            if !normalize(&mut self.u) {
                return Err(TensorError::Invalid {
                    op: "spectral_normalize",
                    msg: "weight matrix has zero spectral norm (all-zero or degenerate)".into(),
                });
            }
        }
        let mut sigma = 0.0;
        for i in 0..rows {
            let row = &w[i * cols..(i + 1) * cols];
            let mut acc = 0.0;
            for (wv, vv) in row.iter().zip(&self.v) {
                acc += wv * vv;
            }
            sigma += self.u[i] * acc;
        }
        Ok(sigma)
    }
}

fn normalize(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= 1e-300 {
        return false;
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    true
}

/// Divides a weight tensor by its estimated largest singular value.
///
/// Runs the state's configured number of power iterations (one by default)
/// and returns the normalized weight together with the sigma estimate.
/// A zero weight matrix is an error: its spectral norm is undefined.
pub fn spectral_normalize(
    weight: &Tensor,
    state: &mut SpectralNormState,
) -> Result<(Tensor, f64), TensorError> {
    let iters = state.n_power_iterations;
    spectral_normalize_with_iters(weight, state, iters)
}

/// [`spectral_normalize`] with an explicit iteration count (tests use enough
/// iterations to converge).
pub fn spectral_normalize_with_iters(
    weight: &Tensor,
    state: &mut SpectralNormState,
    iters: usize,
) -> Result<(Tensor, f64), TensorError> {
    let shape = weight.shape();
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product();
    let sigma = state.power_iterate(weight.data(), rows, cols, iters)?;
    if sigma.abs() <= 1e-300 {
        return Err(TensorError::Invalid {
            op: "spectral_normalize",
            msg: "estimated spectral norm is zero".into(),
        });
    }
    let data: Vec<f64> = weight.data().iter().map(|v| v / sigma).collect();
    let normalized = Tensor::new(shape.to_vec(), data)?;
    Ok((normalized, sigma))
}

/// Records `weight / sigma` on the tape with `sigma = u^T W v` so gradients
/// flow through both the numerator and the denominator. `u` and `v` are the
/// current power-iteration estimates, treated as constants.
pub fn spectral_normalize_on_tape(
    tape: &mut Tape,
    weight: TensorId,
    state: &SpectralNormState,
) -> Result<TensorId, TensorError> {
    let shape = tape.shape(weight).to_vec();
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product();
    if state.u.len() != rows || state.v.len() != cols {
        return Err(TensorError::DimMismatch {
            op: "spectral_normalize",
            what: "power-iteration state vs weight matrix",
            left: vec![state.u.len(), state.v.len()],
            right: vec![rows, cols],
        });
    }
    let mut outer = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            outer[i * cols + j] = state.u[i] * state.v[j];
        }
    }
    let uv = tape.constant(Tensor::new(shape, outer)?);
    let prod = tape.mul(weight, uv)?;
    let sigma = tape.sum(prod)?;
    let inv_sigma = tape.recip(sigma)?;
    tape.mul_scalar_tensor(weight, inv_sigma)
}

/// Hinge loss for the discriminator:
/// `mean(max(0, 1 - real)) + mean(max(0, 1 + fake))`.
pub fn hinge_d_loss(
    tape: &mut Tape,
    real_scores: TensorId,
    fake_scores: TensorId,
) -> Result<TensorId, TensorError> {
    let neg_real = tape.scale(real_scores, -1.0)?;
    let real_margin = tape.add_scalar(neg_real, 1.0)?;
    let real_hinge = tape.relu(real_margin)?;
    let real_term = tape.mean(real_hinge)?;
    let fake_margin = tape.add_scalar(fake_scores, 1.0)?;
    let fake_hinge = tape.relu(fake_margin)?;
    let fake_term = tape.mean(fake_hinge)?;
    tape.add(real_term, fake_term)
}

/// Hinge loss for the generator: `-mean(fake)`.
pub fn hinge_g_loss(tape: &mut Tape, fake_scores: TensorId) -> Result<TensorId, TensorError> {
    let m = tape.mean(fake_scores)?;
    tape.scale(m, -1.0)
}

/// Leaky ReLU with slope 0.2, composed from primitive ops:
/// `relu(x) - 0.2 * relu(-x)`.
pub fn leaky_relu(tape: &mut Tape, x: TensorId) -> Result<TensorId, TensorError> {
    let pos = tape.relu(x)?;
    let neg_x = tape.scale(x, -1.0)?;
    let neg = tape.relu(neg_x)?;
    let neg_scaled = tape.scale(neg, 0.2)?;
    tape.sub(pos, neg_scaled)
}

/// Bound parameter ids for one residual block: two 3x3 stride-1 convolutions,
/// each followed by instance normalization.
#[derive(Debug, Clone, Copy)]
pub struct ResidualBlockIds {
    pub conv1_w: TensorId,
    pub norm1_gamma: TensorId,
    pub norm1_beta: TensorId,
    pub conv2_w: TensorId,
    pub norm2_gamma: TensorId,
    pub norm2_beta: TensorId,
}

/// `input + IN(conv(relu(IN(conv(input)))))`, all convolutions 3x3 stride 1
/// with same-size zero padding. Channel count is preserved.
pub fn residual_block(
    tape: &mut Tape,
    input: TensorId,
    ids: &ResidualBlockIds,
    eps: f64,
) -> Result<TensorId, TensorError> {
    let c1 = tape.conv2d(input, ids.conv1_w, None, 1, 1)?;
    let n1 = tape.instance_norm(c1, ids.norm1_gamma, ids.norm1_beta, eps)?;
    let r1 = tape.relu(n1)?;
    let c2 = tape.conv2d(r1, ids.conv2_w, None, 1, 1)?;
    let n2 = tape.instance_norm(c2, ids.norm2_gamma, ids.norm2_beta, eps)?;
    tape.add(input, n2)
}
