//! Desk-scale study of checkerboard artifacts in image-to-image GANs.
//!
//! The crate has five parts:
//!
//! * [`autodiff`] — dense `f64` tensors and a tape-based reverse-mode engine
//!   covering exactly the operations the models below need.
//! * [`nn`] — layer building blocks: artifact-free up/down-sampling built
//!   around fixed smoothing kernels, spectral weight normalization, hinge
//!   losses and residual blocks.
//! * [`model`] — two-domain translation networks (a conventional variant with
//!   strided/transposed convolutions and an artifact-free variant), Adam,
//!   the training loop and checkpointing.
//! * [`forensics`] — log-magnitude spectra, a Nyquist-band energy statistic,
//!   and a logistic-regression fake-image detector over 1-D spectrum features.
//! * [`data`] — a deterministic synthetic two-domain dataset plus PNG/PPM
//!   image I/O and value-range conversions.
//!
//! Everything is seeded and deterministic: the same inputs, configuration and
//! seeds produce bitwise-identical results, including across process runs.

pub mod autodiff;
pub mod data;
pub mod forensics;
pub mod model;
pub mod nn;

pub use autodiff::{Tape, Tensor, TensorError, TensorId};
