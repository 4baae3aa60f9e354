//! Image-translation model: two generators, two spectral-norm
//! discriminators, and the adversarial + cycle-consistency training loop.
//!
//! Both generator variants share one topology — a 7x7 encoder convolution,
//! stride-2 downsampling stages, a residual trunk, x2 upsampling stages, and
//! a 7x7 tanh head. They differ only in how resolution changes:
//!
//! * conventional: plain stride-2 convolutions down, stride-2 transposed
//!   convolutions (cropped to the doubled size) up — the checkerboard source;
//! * artifact-free: [`crate::nn::artifact_free_downsample`] and
//!   [`crate::nn::artifact_free_upsample`], which wrap the same trainable
//!   kernels in fixed 2x2 smoothing.
//!
//! The two variants have identical trainable parameter counts; the fixed
//! smoothing kernel carries no parameters and never changes.
//!
//! Training follows the usual unpaired-translation recipe: per step, both
//! discriminators update on a hinge loss against real and (frozen-generator)
//! fake batches, then both generators update jointly on the hinge generator
//! loss plus `cycle_weight` times the L1 cycle-reconstruction loss. Every
//! parameter tensor, optimizer slot, RNG, and power-iteration state is part
//! of the checkpoint, so a restored session continues bitwise-identically.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, TensorError, TensorId};
use crate::data::{self, DataError, ImageBuffer};
use crate::nn::{
    artifact_free_downsample, artifact_free_upsample, hinge_d_loss, hinge_g_loss, leaky_relu,
    residual_block, spectral_normalize_on_tape, FixedKernel, ResidualBlockIds, SpectralNormState,
};

/// Instance-normalization epsilon used by every norm layer in the model.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Standard deviation of the normal weight initialization.
pub const WEIGHT_INIT_STD: f64 = 0.02;

/// Errors from model construction, training, and checkpointing.
#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training step {step} failed: {source}")]
    Step {
        step: u64,
        #[source]
        source: TensorError,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),
    #[error("checkpoint i/o on {path}: {source}")]
    CheckpointIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, ModelError>;

// ── parameter store ─────────────────────────────────────────────────────

/// Flat, ordered collection of named parameter tensors. Layouts index into
/// it; optimizers walk it; [`bind`](ParamStore::bind) registers every tensor
/// on a tape in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    fn new() -> Self {
        Self { entries: Vec::new() }
    }

    fn add(&mut self, name: String, tensor: Tensor) -> usize {
        self.entries.push((name, tensor));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub(crate) fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    /// One scalar parameter. Panics if either index is out of range.
    pub fn value(&self, tensor: usize, index: usize) -> f64 {
        self.entries[tensor].1.data()[index]
    }

    /// Overwrites one scalar parameter — the hook for finite-difference
    /// probing and surgical experiments on a built model.
    pub fn set_value(&mut self, tensor: usize, index: usize, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(ModelError::Config(format!(
                "parameter value must be finite, got {value}"
            )));
        }
        let data = self
            .entries
            .get_mut(tensor)
            .ok_or_else(|| ModelError::Config(format!("no parameter tensor {tensor}")))?
            .1
            .data_mut();
        if index >= data.len() {
            return Err(ModelError::Config(format!(
                "element {index} out of range for parameter tensor {tensor} ({} elements)",
                data.len()
            )));
        }
        data[index] = value;
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers every tensor on the tape, in store order. With
    /// `trainable = false` the parameters become constants: the backward pass
    /// prunes everything that depends only on them.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<TensorId> {
        self.entries
            .iter()
            .map(|(_, t)| tape.leaf(t.clone().requires_grad(trainable)))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        for (name, t) in &self.entries {
            t.validate()
                .map_err(|e| ModelError::Checkpoint(format!("parameter {name}: {e}")))?;
        }
        Ok(())
    }
}

// ── parameter plans ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
enum ParamKind {
    /// Convolution weight: Normal(0, 0.02) init.
    Weight,
    /// Norm gain: ones init.
    Ones,
    /// Norm shift / bias: zeros init.
    Zeros,
}

struct ParamPlan {
    entries: Vec<(String, Vec<usize>, ParamKind)>,
}

impl ParamPlan {
    fn new() -> Self {
        Self { entries: Vec::new() }
    }

    fn push(&mut self, name: String, shape: Vec<usize>, kind: ParamKind) -> usize {
        self.entries.push((name, shape, kind));
        self.entries.len() - 1
    }

    /// Materializes the plan, drawing weight entries from `rng` in order.
    fn build(&self, rng: &mut ChaCha8Rng) -> ParamStore {
        let normal = rand_distr::Normal::new(0.0, WEIGHT_INIT_STD)
            .expect("constant init std is finite and positive");
        let mut store = ParamStore::new();
        for (name, shape, kind) in &self.entries {
            let n: usize = shape.iter().product();
            let t = match kind {
                ParamKind::Weight => {
                    Tensor::new(shape.clone(), (0..n).map(|_| normal.sample(rng)).collect())
                        .expect("planned shapes are consistent")
                }
                ParamKind::Ones => Tensor::full(shape.clone(), 1.0).expect("non-empty shape"),
                ParamKind::Zeros => Tensor::zeros(shape.clone()),
            };
            store.add(name.clone(), t);
        }
        store
    }

    /// Checks that a deserialized store matches this plan name-for-name and
    /// shape-for-shape.
    fn verify(&self, store: &ParamStore) -> Result<()> {
        if store.len() != self.entries.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.entries.len(),
                store.len()
            )));
        }
        for (i, (name, shape, _)) in self.entries.iter().enumerate() {
            if store.name(i) != name {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {i} should be {name}, found {}",
                    store.name(i)
                )));
            }
            if store.tensor(i).shape() != &shape[..] {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {name} should have shape {shape:?}, found {:?}",
                    store.tensor(i).shape()
                )));
            }
        }
        store.validate()
    }
}

// ── Adam ────────────────────────────────────────────────────────────────

/// Adam optimizer over one [`ParamStore`], with first/second-moment slots per
/// parameter tensor. Fully serializable so a restored run continues exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, betas: (f64, f64), store: &ParamStore) -> Self {
        let m = (0..store.len()).map(|i| vec![0.0; store.tensor(i).numel()]).collect();
        let v = (0..store.len()).map(|i| vec![0.0; store.tensor(i).numel()]).collect();
        Self { learning_rate, beta1: betas.0, beta2: betas.1, eps: 1e-8, t: 0, m, v }
    }

    /// Applies one update using the gradients `backward` left on the bound
    /// tape leaves. Parameters the loss never touched keep zero moments and
    /// stay bitwise unchanged.
    pub fn step(&mut self, store: &mut ParamStore, tape: &Tape, bound: &[TensorId]) -> Result<()> {
        if bound.len() != store.len() || self.m.len() != store.len() {
            return Err(ModelError::Config(format!(
                "optimizer bound to {} tensors, store has {}, slots {}",
                bound.len(),
                store.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..store.len() {
            let Some(grad) = tape.grad(bound[i]) else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let params = store.tensor_mut(i).data_mut();
            for j in 0..params.len() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                params[j] -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    fn verify(&self, store: &ParamStore) -> Result<()> {
        if self.m.len() != store.len() || self.v.len() != store.len() {
            return Err(ModelError::Checkpoint("optimizer slot count mismatch".into()));
        }
        for i in 0..store.len() {
            let n = store.tensor(i).numel();
            if self.m[i].len() != n || self.v[i].len() != n {
                return Err(ModelError::Checkpoint(format!(
                    "optimizer slots for {} have wrong length",
                    store.name(i)
                )));
            }
        }
        Ok(())
    }
}

// ── generator ───────────────────────────────────────────────────────────

/// Architecture knobs shared by both generator variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Square input/output size; a power of two, at least 16.
    pub image_size: usize,
    /// Channel count after the encoder convolution; doubles per downsample.
    pub base_channels: usize,
    pub n_downsamples: usize,
    pub n_residual_blocks: usize,
    /// Selects the fixed-smoothing resampling layers instead of plain
    /// strided (transposed) convolutions.
    pub artifact_free: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            base_channels: 16,
            n_downsamples: 2,
            n_residual_blocks: 3,
            artifact_free: false,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.image_size.is_power_of_two() || self.image_size < 16 {
            return Err(ModelError::Config(format!(
                "image_size must be a power of two >= 16, got {}",
                self.image_size
            )));
        }
        if self.n_downsamples == 0 || self.image_size % (1 << self.n_downsamples) != 0 {
            return Err(ModelError::Config(format!(
                "image_size {} is not divisible by 2^{} downsamples",
                self.image_size, self.n_downsamples
            )));
        }
        if self.base_channels == 0 {
            return Err(ModelError::Config("base_channels must be positive".into()));
        }
        if self.n_residual_blocks == 0 {
            return Err(ModelError::Config("need at least one residual block".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvNormIdx {
    w: usize,
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
struct ResIdx {
    w1: usize,
    g1: usize,
    b1: usize,
    w2: usize,
    g2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct GeneratorLayout {
    initial: ConvNormIdx,
    down: Vec<ConvNormIdx>,
    res: Vec<ResIdx>,
    up: Vec<ConvNormIdx>,
    final_w: usize,
    final_b: usize,
}

fn generator_plan(config: &GeneratorConfig) -> (ParamPlan, GeneratorLayout) {
    let mut plan = ParamPlan::new();
    let b = config.base_channels;
    let d = config.n_downsamples;

    let conv_norm = |plan: &mut ParamPlan, name: &str, wshape: Vec<usize>, co: usize| {
        ConvNormIdx {
            w: plan.push(format!("{name}.w"), wshape, ParamKind::Weight),
            gamma: plan.push(format!("{name}.gamma"), vec![co], ParamKind::Ones),
            beta: plan.push(format!("{name}.beta"), vec![co], ParamKind::Zeros),
        }
    };

    let initial = conv_norm(&mut plan, "initial", vec![b, 3, 7, 7], b);
    let down = (0..d)
        .map(|i| {
            let (ci, co) = (b << i, b << (i + 1));
            conv_norm(&mut plan, &format!("down{i}"), vec![co, ci, 3, 3], co)
        })
        .collect();
    let trunk_ch = b << d;
    let res = (0..config.n_residual_blocks)
        .map(|j| ResIdx {
            w1: plan.push(format!("res{j}.conv1_w"), vec![trunk_ch, trunk_ch, 3, 3], ParamKind::Weight),
            g1: plan.push(format!("res{j}.norm1_gamma"), vec![trunk_ch], ParamKind::Ones),
            b1: plan.push(format!("res{j}.norm1_beta"), vec![trunk_ch], ParamKind::Zeros),
            w2: plan.push(format!("res{j}.conv2_w"), vec![trunk_ch, trunk_ch, 3, 3], ParamKind::Weight),
            g2: plan.push(format!("res{j}.norm2_gamma"), vec![trunk_ch], ParamKind::Ones),
            b2: plan.push(format!("res{j}.norm2_beta"), vec![trunk_ch], ParamKind::Zeros),
        })
        .collect();
    let up = (0..d)
        .map(|i| {
            let (ci, co) = (b << (d - i), b << (d - i - 1));
            // a transposed convolution stores its weight as [Ci, Co, K, K];
            // the smoothing path convolves normally, so [Co, Ci, K, K] —
            // identical element counts either way
            let wshape = if config.artifact_free {
                vec![co, ci, 3, 3]
            } else {
                vec![ci, co, 3, 3]
            };
            conv_norm(&mut plan, &format!("up{i}"), wshape, co)
        })
        .collect();
    let final_w = plan.push("final.w".into(), vec![3, b, 7, 7], ParamKind::Weight);
    let final_b = plan.push("final.b".into(), vec![3], ParamKind::Zeros);

    (plan, GeneratorLayout { initial, down, res, up, final_w, final_b })
}

/// Intermediate decoder activations, exposed so constancy of every decoder
/// stage can be observed directly.
#[derive(Debug, Clone)]
pub struct DecodeTrace {
    /// Raw output of each upsampling stage, before its norm and activation.
    pub stage_pre_norm: Vec<TensorId>,
    /// Output of the 7x7 head convolution, before tanh.
    pub pre_tanh: TensorId,
    /// Final tanh output.
    pub output: TensorId,
}

/// One translation network. Holds its parameters and (for the artifact-free
/// variant) the fixed smoothing kernel, which carries no trainable state.
#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub store: ParamStore,
    pub fixed: FixedKernel,
    layout: GeneratorLayout,
}

impl Generator {
    pub fn new(config: GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let (plan, layout) = generator_plan(&config);
        let store = plan.build(rng);
        Ok(Self { config, store, fixed: FixedKernel::uniform2x2(), layout })
    }

    /// Rebuilds a generator around restored parameters, verifying that they
    /// match the architecture the config describes.
    pub fn from_parts(config: GeneratorConfig, store: ParamStore, fixed: FixedKernel) -> Result<Self> {
        config.validate()?;
        FixedKernel::new(fixed.kh(), fixed.kw(), fixed.coeffs().to_vec())
            .map_err(|e| ModelError::Checkpoint(format!("fixed kernel: {e}")))?;
        let (plan, layout) = generator_plan(&config);
        plan.verify(&store)?;
        Ok(Self { config, store, fixed, layout })
    }

    pub fn trainable_param_count(&self) -> usize {
        self.store.param_count()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<TensorId> {
        self.store.bind(tape, trainable)
    }

    fn encode(
        &self,
        tape: &mut Tape,
        input: TensorId,
        bound: &[TensorId],
    ) -> std::result::Result<TensorId, TensorError> {
        let l = &self.layout;
        let padded = tape.reflect_pad2d(input, 3)?;
        let conv = tape.conv2d(padded, bound[l.initial.w], None, 1, 0)?;
        let norm =
            tape.instance_norm(conv, bound[l.initial.gamma], bound[l.initial.beta], INSTANCE_NORM_EPS)?;
        let mut x = tape.relu(norm)?;
        for stage in &l.down {
            let conv = if self.config.artifact_free {
                artifact_free_downsample(tape, x, bound[stage.w], None, &self.fixed)?
            } else {
                tape.conv2d(x, bound[stage.w], None, 2, 1)?
            };
            let norm =
                tape.instance_norm(conv, bound[stage.gamma], bound[stage.beta], INSTANCE_NORM_EPS)?;
            x = tape.relu(norm)?;
        }
        Ok(x)
    }

    fn trunk(
        &self,
        tape: &mut Tape,
        mut x: TensorId,
        bound: &[TensorId],
    ) -> std::result::Result<TensorId, TensorError> {
        for r in &self.layout.res {
            let ids = ResidualBlockIds {
                conv1_w: bound[r.w1],
                norm1_gamma: bound[r.g1],
                norm1_beta: bound[r.b1],
                conv2_w: bound[r.w2],
                norm2_gamma: bound[r.g2],
                norm2_beta: bound[r.b2],
            };
            x = residual_block(tape, x, &ids, INSTANCE_NORM_EPS)?;
        }
        Ok(x)
    }

    fn decode(
        &self,
        tape: &mut Tape,
        features: TensorId,
        bound: &[TensorId],
    ) -> std::result::Result<DecodeTrace, TensorError> {
        let l = &self.layout;
        let mut x = features;
        let mut stage_pre_norm = Vec::with_capacity(l.up.len());
        for stage in &l.up {
            let conv = if self.config.artifact_free {
                artifact_free_upsample(tape, x, bound[stage.w], None, &self.fixed)?
            } else {
                let shape = tape.shape(x);
                let (h, w) = (shape[2], shape[3]);
                let full = tape.conv2d_transposed(x, bound[stage.w], 2)?;
                tape.crop2d(full, 0, 0, 2 * h, 2 * w)?
            };
            stage_pre_norm.push(conv);
            let norm =
                tape.instance_norm(conv, bound[stage.gamma], bound[stage.beta], INSTANCE_NORM_EPS)?;
            x = tape.relu(norm)?;
        }
        let padded = tape.reflect_pad2d(x, 3)?;
        let pre_tanh = tape.conv2d(padded, bound[l.final_w], Some(bound[l.final_b]), 1, 0)?;
        let output = tape.tanh(pre_tanh)?;
        Ok(DecodeTrace { stage_pre_norm, pre_tanh, output })
    }

    /// Full forward pass: model-range image batch in, model-range batch out.
    pub fn forward(
        &self,
        tape: &mut Tape,
        input: TensorId,
        bound: &[TensorId],
    ) -> std::result::Result<TensorId, TensorError> {
        let encoded = self.encode(tape, input, bound)?;
        let features = self.trunk(tape, encoded, bound)?;
        Ok(self.decode(tape, features, bound)?.output)
    }

    /// Runs only the decoder on an externally supplied feature map (shape
    /// `[N, base·2^n_downsamples, size/2^n, size/2^n]`), returning every
    /// stage activation.
    pub fn decode_trace(
        &self,
        tape: &mut Tape,
        features: TensorId,
        bound: &[TensorId],
    ) -> std::result::Result<DecodeTrace, TensorError> {
        self.decode(tape, features, bound)
    }

    /// Translates images without recording gradients. Inputs are processed
    /// in small chunks so activation storage stays bounded for large sets.
    pub fn generate(&self, images: &[ImageBuffer]) -> Result<Vec<ImageBuffer>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(8) {
            let input = data::to_model_input(chunk)?;
            let mut tape = Tape::new();
            let x = tape.constant(input);
            let bound = self.bind(&mut tape, false);
            let y = self.forward(&mut tape, x, &bound)?;
            out.extend(data::from_model_output(tape.shape(y), tape.data(y))?);
        }
        Ok(out)
    }
}

// ── discriminator ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
struct DiscLayout {
    /// (weight index, bias index, stride) per convolution layer.
    layers: Vec<(usize, usize, usize)>,
}

fn discriminator_plan(config: &GeneratorConfig) -> (ParamPlan, DiscLayout, Vec<(usize, usize)>) {
    let b = config.base_channels;
    let channels = [3, b, 2 * b, 4 * b, 1];
    let mut plan = ParamPlan::new();
    let mut layers = Vec::new();
    let mut sn_dims = Vec::new();
    for i in 0..4 {
        let (ci, co) = (channels[i], channels[i + 1]);
        let w = plan.push(format!("layer{i}.w"), vec![co, ci, 3, 3], ParamKind::Weight);
        let bias = plan.push(format!("layer{i}.b"), vec![co], ParamKind::Zeros);
        let stride = if i < 3 { 2 } else { 1 };
        layers.push((w, bias, stride));
        sn_dims.push((co, ci * 9));
    }
    (plan, DiscLayout { layers }, sn_dims)
}

/// Patch discriminator: three stride-2 convolutions and a stride-1 head, all
/// spectrally normalized, leaky-relu activations, scalar score per patch.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub config: GeneratorConfig,
    pub store: ParamStore,
    sn: Vec<SpectralNormState>,
    layout: DiscLayout,
}

impl Discriminator {
    pub fn new(config: GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let (plan, layout, sn_dims) = discriminator_plan(&config);
        let store = plan.build(rng);
        let sn = sn_dims.iter().map(|&(r, c)| SpectralNormState::new(r, c, rng)).collect();
        Ok(Self { config, store, sn, layout })
    }

    pub fn from_parts(
        config: GeneratorConfig,
        store: ParamStore,
        sn: Vec<SpectralNormState>,
    ) -> Result<Self> {
        config.validate()?;
        let (plan, layout, sn_dims) = discriminator_plan(&config);
        plan.verify(&store)?;
        if sn.len() != sn_dims.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} spectral-norm states, found {}",
                sn_dims.len(),
                sn.len()
            )));
        }
        for (state, &(r, c)) in sn.iter().zip(&sn_dims) {
            if state.u().len() != r || state.v().len() != c {
                return Err(ModelError::Checkpoint(
                    "spectral-norm state dimensions do not match the weights".into(),
                ));
            }
        }
        Ok(Self { config, store, sn, layout })
    }

    pub fn trainable_param_count(&self) -> usize {
        self.store.param_count()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<TensorId> {
        self.store.bind(tape, trainable)
    }

    pub fn spectral_states(&self) -> &[SpectralNormState] {
        &self.sn
    }

    /// Advances every layer's power iteration against the current weights
    /// and returns the sigma estimates. Called once per training step; tests
    /// pass a large `iters` to converge.
    pub fn refresh_spectral(&mut self, iters: usize) -> Result<Vec<f64>> {
        let mut sigmas = Vec::with_capacity(self.layout.layers.len());
        for (i, &(w, _, _)) in self.layout.layers.iter().enumerate() {
            let t = self.store.tensor(w);
            let rows = t.shape()[0];
            let cols = t.numel() / rows;
            sigmas.push(self.sn[i].power_iterate(t.data(), rows, cols, iters)?);
        }
        Ok(sigmas)
    }

    /// Score map forward pass. Each weight is divided by its current sigma
    /// estimate on the tape, so discriminator gradients see the
    /// normalization.
    pub fn forward(
        &self,
        tape: &mut Tape,
        input: TensorId,
        bound: &[TensorId],
    ) -> std::result::Result<TensorId, TensorError> {
        let mut x = input;
        let last = self.layout.layers.len() - 1;
        for (i, &(w, b, stride)) in self.layout.layers.iter().enumerate() {
            let wn = spectral_normalize_on_tape(tape, bound[w], &self.sn[i])?;
            x = tape.conv2d(x, wn, Some(bound[b]), stride, 1)?;
            if i != last {
                x = leaky_relu(tape, x)?;
            }
        }
        Ok(x)
    }
}

// ── losses ──────────────────────────────────────────────────────────────

/// Mean absolute difference between an image batch and its reconstruction.
pub fn cycle_loss(
    tape: &mut Tape,
    x: TensorId,
    reconstruction: TensorId,
) -> std::result::Result<TensorId, TensorError> {
    tape.l1_distance(x, reconstruction)
}

// ── training session ────────────────────────────────────────────────────

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    /// Weight of the cycle-reconstruction term in the generator loss.
    pub cycle_weight: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub rng_seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            adam_betas: (0.5, 0.999),
            cycle_weight: 10.0,
            batch_size: 1,
            total_steps: 200,
            rng_seed: 7,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(ModelError::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.cycle_weight.is_finite() && self.cycle_weight >= 0.0) {
            return Err(ModelError::Config(format!(
                "cycle_weight must be finite and >= 0, got {}",
                self.cycle_weight
            )));
        }
        if self.batch_size == 0 {
            return Err(ModelError::Config("batch_size must be positive".into()));
        }
        if self.total_steps == 0 {
            return Err(ModelError::Config("total_steps must be positive".into()));
        }
        Ok(())
    }
}

/// Per-step loss components: summed discriminator hinge loss, summed
/// generator adversarial loss, and the (unweighted) summed cycle loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub adv_d: f64,
    pub adv_g: f64,
    pub cyc: f64,
}

/// Fixed CSV column order for loss histories.
pub const LOSS_CSV_HEADER: &str = "step,adv_d,adv_g,cyc";

/// Renders a loss history as CSV. Values print with `f64`'s shortest
/// round-trip formatting, so parsing the file recovers the exact bits.
pub fn losses_to_csv(history: &[LossRecord]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.adv_d, r.adv_g, r.cyc));
    }
    out
}

/// The four networks of one unpaired-translation setup.
#[derive(Debug, Clone)]
pub struct CycleGANModel {
    pub g_ab: Generator,
    pub g_ba: Generator,
    pub d_a: Discriminator,
    pub d_b: Discriminator,
}

impl CycleGANModel {
    /// Builds all four networks from one RNG, in a fixed order.
    pub fn new(config: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            g_ab: Generator::new(config.clone(), rng)?,
            g_ba: Generator::new(config.clone(), rng)?,
            d_a: Discriminator::new(config.clone(), rng)?,
            d_b: Discriminator::new(config.clone(), rng)?,
        })
    }
}

/// Serializable snapshot of an entire training session.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub generator_config: GeneratorConfig,
    pub training_config: TrainingConfig,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub fixed_kernel: FixedKernel,
    pub g_ab: ParamStore,
    pub g_ba: ParamStore,
    pub d_a: ParamStore,
    pub d_b: ParamStore,
    pub sn_a: Vec<SpectralNormState>,
    pub sn_b: Vec<SpectralNormState>,
    pub adam_g_ab: Adam,
    pub adam_g_ba: Adam,
    pub adam_d_a: Adam,
    pub adam_d_b: Adam,
    pub history: Vec<LossRecord>,
}

/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)
            .map_err(|source| ModelError::CheckpointIo { path: path.to_path_buf(), source })?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)
            .map_err(|e| ModelError::Checkpoint(format!("serialize: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|source| ModelError::CheckpointIo { path: path.to_path_buf(), source })?;
        serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| ModelError::Checkpoint(format!("parse: {e}")))
    }
}

/// One sequential training run: the four networks, their optimizers, the
/// batch-sampling RNG, and the loss history.
pub struct TrainSession {
    pub model: CycleGANModel,
    generator_config: GeneratorConfig,
    training_config: TrainingConfig,
    adam_g_ab: Adam,
    adam_g_ba: Adam,
    adam_d_a: Adam,
    adam_d_b: Adam,
    rng: ChaCha8Rng,
    step: u64,
    history: Vec<LossRecord>,
}

impl TrainSession {
    pub fn new(generator_config: GeneratorConfig, training_config: TrainingConfig) -> Result<Self> {
        generator_config.validate()?;
        training_config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(training_config.rng_seed);
        let model = CycleGANModel::new(&generator_config, &mut rng)?;
        let lr = training_config.learning_rate;
        let betas = training_config.adam_betas;
        Ok(Self {
            adam_g_ab: Adam::new(lr, betas, &model.g_ab.store),
            adam_g_ba: Adam::new(lr, betas, &model.g_ba.store),
            adam_d_a: Adam::new(lr, betas, &model.d_a.store),
            adam_d_b: Adam::new(lr, betas, &model.d_b.store),
            model,
            generator_config,
            training_config,
            rng,
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn generator_config(&self) -> &GeneratorConfig {
        &self.generator_config
    }

    pub fn training_config(&self) -> &TrainingConfig {
        &self.training_config
    }

    /// Retargets the step budget, e.g. when resuming a checkpoint toward a
    /// longer schedule. Optimizer hyperparameters are untouched.
    pub fn set_total_steps(&mut self, steps: u64) {
        self.training_config.total_steps = steps;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn history(&self) -> &[LossRecord] {
        &self.history
    }

    /// One full optimization step on pre-assembled model-range batches:
    /// both discriminators first (against frozen generators), then both
    /// generators jointly.
    pub fn train_step(&mut self, batch_a: &Tensor, batch_b: &Tensor) -> Result<LossRecord> {
        let step = self.step + 1;
        let fail = |source: TensorError| ModelError::Step { step, source };

        // advance the sigma estimates once per step against current weights
        self.model.d_a.refresh_spectral(1).map_err(|e| match e {
            ModelError::Tensor(t) => fail(t),
            other => other,
        })?;
        self.model.d_b.refresh_spectral(1).map_err(|e| match e {
            ModelError::Tensor(t) => fail(t),
            other => other,
        })?;

        // discriminator phase: generators frozen, so their parameters are
        // constants and backward prunes the generator subgraphs
        let (adv_d,) = {
            let mut tape = Tape::new();
            let a = tape.constant(batch_a.clone());
            let b = tape.constant(batch_b.clone());
            let g_ab_ids = self.model.g_ab.bind(&mut tape, false);
            let g_ba_ids = self.model.g_ba.bind(&mut tape, false);
            let d_a_ids = self.model.d_a.bind(&mut tape, true);
            let d_b_ids = self.model.d_b.bind(&mut tape, true);

            let fake_b = self.model.g_ab.forward(&mut tape, a, &g_ab_ids).map_err(fail)?;
            let fake_a = self.model.g_ba.forward(&mut tape, b, &g_ba_ids).map_err(fail)?;
            let da_real = self.model.d_a.forward(&mut tape, a, &d_a_ids).map_err(fail)?;
            let da_fake = self.model.d_a.forward(&mut tape, fake_a, &d_a_ids).map_err(fail)?;
            let db_real = self.model.d_b.forward(&mut tape, b, &d_b_ids).map_err(fail)?;
            let db_fake = self.model.d_b.forward(&mut tape, fake_b, &d_b_ids).map_err(fail)?;
            let loss_da = hinge_d_loss(&mut tape, da_real, da_fake).map_err(fail)?;
            let loss_db = hinge_d_loss(&mut tape, db_real, db_fake).map_err(fail)?;
            let loss_d = tape.add(loss_da, loss_db).map_err(fail)?;
            let adv_d = tape.scalar_value(loss_d);
            tape.backward(loss_d).map_err(fail)?;
            self.adam_d_a.step(&mut self.model.d_a.store, &tape, &d_a_ids)?;
            self.adam_d_b.step(&mut self.model.d_b.store, &tape, &d_b_ids)?;
            (adv_d,)
        };

        // generator phase: discriminators frozen
        let (adv_g, cyc) = {
            let mut tape = Tape::new();
            let a = tape.constant(batch_a.clone());
            let b = tape.constant(batch_b.clone());
            let g_ab_ids = self.model.g_ab.bind(&mut tape, true);
            let g_ba_ids = self.model.g_ba.bind(&mut tape, true);
            let d_a_ids = self.model.d_a.bind(&mut tape, false);
            let d_b_ids = self.model.d_b.bind(&mut tape, false);

            let fake_b = self.model.g_ab.forward(&mut tape, a, &g_ab_ids).map_err(fail)?;
            let rec_a = self.model.g_ba.forward(&mut tape, fake_b, &g_ba_ids).map_err(fail)?;
            let fake_a = self.model.g_ba.forward(&mut tape, b, &g_ba_ids).map_err(fail)?;
            let rec_b = self.model.g_ab.forward(&mut tape, fake_a, &g_ab_ids).map_err(fail)?;

            let score_b = self.model.d_b.forward(&mut tape, fake_b, &d_b_ids).map_err(fail)?;
            let score_a = self.model.d_a.forward(&mut tape, fake_a, &d_a_ids).map_err(fail)?;
            let adv_ab = hinge_g_loss(&mut tape, score_b).map_err(fail)?;
            let adv_ba = hinge_g_loss(&mut tape, score_a).map_err(fail)?;
            let adv = tape.add(adv_ab, adv_ba).map_err(fail)?;

            let cyc_a = cycle_loss(&mut tape, a, rec_a).map_err(fail)?;
            let cyc_b = cycle_loss(&mut tape, b, rec_b).map_err(fail)?;
            let cyc = tape.add(cyc_a, cyc_b).map_err(fail)?;
            let cyc_weighted = tape.scale(cyc, self.training_config.cycle_weight).map_err(fail)?;
            let loss_g = tape.add(adv, cyc_weighted).map_err(fail)?;

            let adv_g = tape.scalar_value(adv);
            let cyc_value = tape.scalar_value(cyc);
            tape.backward(loss_g).map_err(fail)?;
            self.adam_g_ab.step(&mut self.model.g_ab.store, &tape, &g_ab_ids)?;
            self.adam_g_ba.step(&mut self.model.g_ba.store, &tape, &g_ba_ids)?;
            (adv_g, cyc_value)
        };

        self.step = step;
        let record = LossRecord { step, adv_d, adv_g, cyc };
        self.history.push(record);
        Ok(record)
    }

    /// Runs `steps` training steps, sampling `batch_size` images uniformly
    /// (with replacement) from each domain per step via the session RNG.
    pub fn run(
        &mut self,
        train_a: &[ImageBuffer],
        train_b: &[ImageBuffer],
        steps: u64,
    ) -> Result<()> {
        if train_a.is_empty() || train_b.is_empty() {
            return Err(ModelError::Config("training sets must be non-empty".into()));
        }
        for _ in 0..steps {
            let bs = self.training_config.batch_size;
            let pick_a: Vec<ImageBuffer> = (0..bs)
                .map(|_| train_a[self.rng.gen_range(0..train_a.len())].clone())
                .collect();
            let pick_b: Vec<ImageBuffer> = (0..bs)
                .map(|_| train_b[self.rng.gen_range(0..train_b.len())].clone())
                .collect();
            let batch_a = data::to_model_input(&pick_a)?;
            let batch_b = data::to_model_input(&pick_b)?;
            self.train_step(&batch_a, &batch_b)?;
        }
        Ok(())
    }

    /// Snapshot of the complete session state.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            generator_config: self.generator_config.clone(),
            training_config: self.training_config.clone(),
            step: self.step,
            rng: self.rng.clone(),
            fixed_kernel: self.model.g_ab.fixed.clone(),
            g_ab: self.model.g_ab.store.clone(),
            g_ba: self.model.g_ba.store.clone(),
            d_a: self.model.d_a.store.clone(),
            d_b: self.model.d_b.store.clone(),
            sn_a: self.model.d_a.sn.clone(),
            sn_b: self.model.d_b.sn.clone(),
            adam_g_ab: self.adam_g_ab.clone(),
            adam_g_ba: self.adam_g_ba.clone(),
            adam_d_a: self.adam_d_a.clone(),
            adam_d_b: self.adam_d_b.clone(),
            history: self.history.clone(),
        }
    }

    /// Rebuilds a session from a checkpoint; continuing it reproduces the
    /// uninterrupted run bitwise.
    pub fn restore(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        ckpt.training_config.validate()?;
        let model = CycleGANModel {
            g_ab: Generator::from_parts(
                ckpt.generator_config.clone(),
                ckpt.g_ab,
                ckpt.fixed_kernel.clone(),
            )?,
            g_ba: Generator::from_parts(
                ckpt.generator_config.clone(),
                ckpt.g_ba,
                ckpt.fixed_kernel.clone(),
            )?,
            d_a: Discriminator::from_parts(ckpt.generator_config.clone(), ckpt.d_a, ckpt.sn_a)?,
            d_b: Discriminator::from_parts(ckpt.generator_config.clone(), ckpt.d_b, ckpt.sn_b)?,
        };
        ckpt.adam_g_ab.verify(&model.g_ab.store)?;
        ckpt.adam_g_ba.verify(&model.g_ba.store)?;
        ckpt.adam_d_a.verify(&model.d_a.store)?;
        ckpt.adam_d_b.verify(&model.d_b.store)?;
        if ckpt.history.len() as u64 != ckpt.step {
            return Err(ModelError::Checkpoint(format!(
                "history has {} records but step counter is {}",
                ckpt.history.len(),
                ckpt.step
            )));
        }
        Ok(Self {
            model,
            generator_config: ckpt.generator_config,
            training_config: ckpt.training_config,
            adam_g_ab: ckpt.adam_g_ab,
            adam_g_ba: ckpt.adam_g_ba,
            adam_d_a: ckpt.adam_d_a,
            adam_d_b: ckpt.adam_d_b,
            rng: ckpt.rng,
            step: ckpt.step,
            history: ckpt.history,
        })
    }
}

// ── tests ───────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    /// Small architecture used throughout the tests so forward passes stay
    /// cheap; shape arithmetic is identical to the default.
    fn tiny_config(artifact_free: bool) -> GeneratorConfig {
        GeneratorConfig {
            image_size: 16,
            base_channels: 4,
            n_downsamples: 2,
            n_residual_blocks: 1,
            artifact_free,
        }
    }

    fn tiny_training(total_steps: u64) -> TrainingConfig {
        TrainingConfig { total_steps, ..TrainingConfig::default() }
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Tensor {
        let data = (0..n * 3 * size * size).map(|_| rng.gen_range(-0.9..0.9)).collect();
        Tensor::new(vec![n, 3, size, size], data).unwrap()
    }

    fn tiny_images(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Vec<ImageBuffer> {
        (0..n)
            .map(|_| {
                let data = (0..size * size * 3).map(|_| rng.gen_range(0.0..=1.0)).collect();
                ImageBuffer::new(size, size, data).unwrap()
            })
            .collect()
    }

    #[test]
    fn config_validation_rejects_bad_sizes() {
        assert!(GeneratorConfig::default().validate().is_ok());
        let bad = GeneratorConfig { image_size: 20, ..GeneratorConfig::default() };
        assert!(bad.validate().is_err(), "20 is not a power of two");
        let small = GeneratorConfig { image_size: 8, ..GeneratorConfig::default() };
        assert!(small.validate().is_err(), "below the 16 minimum");
        let zero = GeneratorConfig { base_channels: 0, ..GeneratorConfig::default() };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn generator_output_shape_matches_input_for_both_variants() {
        for af in [false, true] {
            let mut rng = ChaCha8Rng::seed_from_u64(60);
            let gen = Generator::new(tiny_config(af), &mut rng).unwrap();
            let mut tape = Tape::new();
            let x = tape.constant(random_batch(&mut rng, 2, 16));
            let bound = gen.bind(&mut tape, false);
            let y = gen.forward(&mut tape, x, &bound).unwrap();
            assert_eq!(tape.shape(y), &[2, 3, 16, 16], "artifact_free={af}");
            // tanh output range
            assert!(tape.data(y).iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn trainable_parameter_counts_are_identical_across_variants() {
        let mut rng1 = ChaCha8Rng::seed_from_u64(61);
        let mut rng2 = ChaCha8Rng::seed_from_u64(61);
        let conv = Generator::new(tiny_config(false), &mut rng1).unwrap();
        let af = Generator::new(tiny_config(true), &mut rng2).unwrap();
        assert_eq!(conv.trainable_param_count(), af.trainable_param_count());
        assert!(conv.trainable_param_count() > 0);
    }

    /// With a constant feature map entering the decoder, every artifact-free
    /// decoder stage — including the pre-tanh head output — is spatially
    /// constant per channel, exactly, whatever the weights are.
    #[test]
    fn artifact_free_decoder_keeps_constants_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let gen = Generator::new(tiny_config(true), &mut rng).unwrap();
        let mut tape = Tape::new();
        let trunk_ch = 4 << 2;
        let features = tape.constant(Tensor::full(vec![1, trunk_ch, 4, 4], 0.37).unwrap());
        let bound = gen.bind(&mut tape, false);
        let trace = gen.decode_trace(&mut tape, features, &bound).unwrap();

        let assert_channelwise_constant = |tape: &Tape, id: TensorId, what: &str| {
            let shape = tape.shape(id).to_vec();
            let plane = shape[2] * shape[3];
            for c in 0..shape[1] {
                let d = &tape.data(id)[c * plane..(c + 1) * plane];
                let spread = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    - d.iter().cloned().fold(f64::INFINITY, f64::min);
                assert_eq!(spread, 0.0, "{what} channel {c} is not constant");
            }
        };
        for (i, &stage) in trace.stage_pre_norm.iter().enumerate() {
            assert_channelwise_constant(&tape, stage, &format!("decoder stage {i}"));
        }
        assert_channelwise_constant(&tape, trace.pre_tanh, "pre-tanh head");
    }

    /// The conventional decoder, by contrast, breaks constancy.
    #[test]
    fn conventional_decoder_breaks_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let gen = Generator::new(tiny_config(false), &mut rng).unwrap();
        let mut tape = Tape::new();
        let features = tape.constant(Tensor::full(vec![1, 16, 4, 4], 0.37).unwrap());
        let bound = gen.bind(&mut tape, false);
        let trace = gen.decode_trace(&mut tape, features, &bound).unwrap();
        let first = trace.stage_pre_norm[0];
        let shape = tape.shape(first).to_vec();
        let plane = shape[2] * shape[3];
        let d = &tape.data(first)[..plane];
        let spread = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - d.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread > 1e-6, "transposed conv unexpectedly preserved a constant");
    }

    #[test]
    fn discriminator_score_map_shape_and_normalized_sigmas() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let mut disc = Discriminator::new(tiny_config(false), &mut rng).unwrap();
        let sigmas = disc.refresh_spectral(100).unwrap();

        // oracle: exact largest singular value per layer
        for (i, &(w, _, _)) in disc.layout.layers.iter().enumerate() {
            let t = disc.store.tensor(w);
            let rows = t.shape()[0];
            let cols = t.numel() / rows;
            let m = nalgebra::DMatrix::from_row_slice(rows, cols, t.data());
            let svd_sigma = m.svd(false, false).singular_values[0];
            let rel = (sigmas[i] - svd_sigma).abs() / svd_sigma;
            assert!(rel <= 1e-3, "layer {i}: sigma {} vs svd {svd_sigma}", sigmas[i]);
        }

        let mut tape = Tape::new();
        let x = tape.constant(random_batch(&mut rng, 2, 16));
        let bound = disc.bind(&mut tape, false);
        let score = disc.forward(&mut tape, x, &bound).unwrap();
        assert_eq!(tape.shape(score), &[2, 1, 2, 2]); // 16 / 2^3
    }

    #[test]
    fn same_seed_rebuild_is_identical() {
        let config = tiny_config(true);
        let mut r1 = ChaCha8Rng::seed_from_u64(65);
        let mut r2 = ChaCha8Rng::seed_from_u64(65);
        let m1 = CycleGANModel::new(&config, &mut r1).unwrap();
        let m2 = CycleGANModel::new(&config, &mut r2).unwrap();
        assert_eq!(m1.g_ab.store, m2.g_ab.store);
        assert_eq!(m1.g_ba.store, m2.g_ba.store);
        assert_eq!(m1.d_a.store, m2.d_a.store);
        assert_eq!(m1.d_b.store, m2.d_b.store);
    }

    #[test]
    fn cycle_loss_worked_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let mut tape = Tape::new();
        let x = tape.constant(random_batch(&mut rng, 1, 16));
        let same = cycle_loss(&mut tape, x, x).unwrap();
        assert_eq!(tape.scalar_value(same), 0.0);

        let xv: Vec<f64> = tape.data(x).to_vec();
        let shifted: Vec<f64> = xv.iter().map(|v| v + 0.1).collect();
        let y = tape.constant(Tensor::new(vec![1, 3, 16, 16], shifted).unwrap());
        let l = cycle_loss(&mut tape, x, y).unwrap();
        assert!((tape.scalar_value(l) - 0.1).abs() < 1e-12);

        let other = random_batch(&mut rng, 1, 16);
        let direct = xv
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / xv.len() as f64;
        let o = tape.constant(other);
        let l2 = cycle_loss(&mut tape, x, o).unwrap();
        assert!((tape.scalar_value(l2) - direct).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_step_leaves_parameters_bitwise_unchanged() {
        let mut session = TrainSession::new(
            tiny_config(true),
            TrainingConfig { learning_rate: 0.0, ..tiny_training(1) },
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let a = random_batch(&mut rng, 1, 16);
        let b = random_batch(&mut rng, 1, 16);
        let before = (
            session.model.g_ab.store.clone(),
            session.model.g_ba.store.clone(),
            session.model.d_a.store.clone(),
            session.model.d_b.store.clone(),
        );
        let record = session.train_step(&a, &b).unwrap();
        assert!(record.adv_d.is_finite() && record.adv_g.is_finite() && record.cyc.is_finite());
        assert_eq!(before.0, session.model.g_ab.store);
        assert_eq!(before.1, session.model.g_ba.store);
        assert_eq!(before.2, session.model.d_a.store);
        assert_eq!(before.3, session.model.d_b.store);
    }

    #[test]
    fn same_seed_runs_produce_bitwise_identical_histories() {
        let mut rng = ChaCha8Rng::seed_from_u64(68);
        let imgs_a = tiny_images(&mut rng, 4, 16);
        let imgs_b = tiny_images(&mut rng, 4, 16);
        let run = |_: ()| {
            let mut s = TrainSession::new(tiny_config(false), tiny_training(3)).unwrap();
            s.run(&imgs_a, &imgs_b, 3).unwrap();
            (s.history().to_vec(), s.model.g_ab.store.clone())
        };
        let (h1, p1) = run(());
        let (h2, p2) = run(());
        assert_eq!(h1, h2);
        assert_eq!(p1, p2);
        assert!(h1.iter().all(|r| r.adv_d.is_finite() && r.adv_g.is_finite() && r.cyc.is_finite()));
    }

    #[test]
    fn checkpoint_resume_reproduces_uninterrupted_run_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(69);
        let imgs_a = tiny_images(&mut rng, 3, 16);
        let imgs_b = tiny_images(&mut rng, 3, 16);

        // uninterrupted: 4 steps
        let mut full = TrainSession::new(tiny_config(true), tiny_training(4)).unwrap();
        full.run(&imgs_a, &imgs_b, 4).unwrap();

        // interrupted: 2 steps, checkpoint through JSON, 2 more
        let mut half = TrainSession::new(tiny_config(true), tiny_training(4)).unwrap();
        half.run(&imgs_a, &imgs_b, 2).unwrap();
        let json = serde_json::to_string(&half.checkpoint()).unwrap();
        let restored: Checkpoint = serde_json::from_str(&json).unwrap();
        let mut resumed = TrainSession::restore(restored).unwrap();
        resumed.run(&imgs_a, &imgs_b, 2).unwrap();

        assert_eq!(full.history(), resumed.history());
        assert_eq!(full.model.g_ab.store, resumed.model.g_ab.store);
        assert_eq!(full.model.d_b.store, resumed.model.d_b.store);
        // the fixed kernel is bit-identical across the run
        assert_eq!(full.model.g_ab.fixed, resumed.model.g_ab.fixed);
        assert_eq!(full.model.g_ab.fixed, FixedKernel::uniform2x2());
    }

    #[test]
    fn restore_rejects_tampered_checkpoints() {
        let session = TrainSession::new(tiny_config(false), tiny_training(1)).unwrap();
        let good = session.checkpoint();

        let mut wrong_version = good.clone();
        wrong_version.version = 99;
        assert!(TrainSession::restore(wrong_version).is_err());

        let mut missing_params = good.clone();
        missing_params.g_ab = ParamStore::new();
        assert!(TrainSession::restore(missing_params).is_err());

        let mut wrong_history = good;
        wrong_history.step = 5;
        assert!(TrainSession::restore(wrong_history).is_err());
    }

    #[test]
    fn non_finite_forward_aborts_with_step_and_op_diagnostic() {
        let mut session = TrainSession::new(tiny_config(false), tiny_training(1)).unwrap();
        // poison one weight so the first convolution's accumulation overflows
        let w = session.model.g_ab.store.tensor_mut(0).data_mut();
        for v in w.iter_mut() {
            *v = 1e308;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let a = random_batch(&mut rng, 1, 16);
        let b = random_batch(&mut rng, 1, 16);
        let err = session.train_step(&a, &b).unwrap_err().to_string();
        assert!(err.contains("step 1"), "missing step number: {err}");
        assert!(err.contains("non-finite value produced by"), "missing diagnostic: {err}");
    }

    #[test]
    fn generate_is_deterministic_and_shape_preserving() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let gen = Generator::new(tiny_config(true), &mut rng).unwrap();
        let inputs = tiny_images(&mut rng, 3, 16);
        let out1 = gen.generate(&inputs).unwrap();
        let out2 = gen.generate(&inputs).unwrap();
        assert_eq!(out1.len(), 3);
        assert_eq!(out1, out2);
        for img in &out1 {
            assert_eq!((img.height(), img.width()), (16, 16));
        }
    }

    #[test]
    fn loss_csv_is_stable_and_round_trips() {
        let history = vec![
            LossRecord { step: 1, adv_d: 2.0, adv_g: -0.125, cyc: 0.6000000000000001 },
            LossRecord { step: 2, adv_d: 1.5, adv_g: 0.25, cyc: 0.3 },
        ];
        let csv = losses_to_csv(&history);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(LOSS_CSV_HEADER));
        let rows: Vec<Vec<f64>> = lines
            .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows[0], vec![2.0, -0.125, 0.6000000000000001]);
        assert_eq!(rows[1], vec![1.5, 0.25, 0.3]);
    }
}
