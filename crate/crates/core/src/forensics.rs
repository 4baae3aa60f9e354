//! Frequency-domain image forensics: logarithmic spectra, checkerboard
//! quantification, and a spectrum-feature fake-image detector.
//!
//! Stride-2 resampling layers leave periodic, Nyquist-frequency patterns in
//! generated images. This module measures that evidence three ways:
//!
//! * [`log_spectrum`] — the 2D log-magnitude spectrum (DC-centered) plus a 1D
//!   horizontal profile averaged over rows, the detector's feature vector;
//! * [`nyquist_energy_ratio`] — the fraction of non-DC spectral energy on the
//!   Nyquist rows/columns, a scalar artifact score;
//! * [`train_detector`] / [`classify`] / [`evaluate`] — a logistic-regression
//!   detector over 1D-spectrum features with the usual confusion-matrix
//!   accuracies, where *fake is the negative class*: `acc_fake` is the true
//!   negatives over the fake query count.
//!
//! All grayscale conversion uses fixed luma weights (0.299, 0.587, 0.114) and
//! all DFTs are unnormalized forward transforms.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::data::ImageBuffer;

/// Errors from spectral analysis and detection.
#[derive(Debug, thiserror::Error)]
pub enum ForensicsError {
    #[error("image too small for spectral analysis: {h}x{w} (need at least 4x4)")]
    DegenerateSize { h: usize, w: usize },
    #[error("matrix data length {got} does not match {h}x{w}")]
    MatrixShape { h: usize, w: usize, got: usize },
    #[error("detector expects {expected} features for {h}x{w} images, got {got}")]
    FeatureLength { expected: usize, got: usize, h: usize, w: usize },
    #[error("training/query sets must share one image size; found {a}x{b} and {c}x{d}")]
    MixedSizes { a: usize, b: usize, c: usize, d: usize },
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("inconsistent confusion counts: {0}")]
    BadCounts(String),
    #[error("malformed CSV: {0}")]
    Csv(String),
}

type Result<T> = std::result::Result<T, ForensicsError>;

// ── transforms ──────────────────────────────────────────────────────────

/// Unnormalized forward 2D DFT of a real matrix (row transforms, then column
/// transforms), returned row-major with ordinary (unshifted) bin indices.
fn dft2d(h: usize, w: usize, data: &[f64]) -> Vec<Complex<f64>> {
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);

    let mut grid: Vec<Complex<f64>> = data.iter().map(|&v| Complex::new(v, 0.0)).collect();
    for row in grid.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            grid[y * w + x] = col[y];
        }
    }
    grid
}

/// Moves DC to the center bin `(h/2, w/2)`: `out[(k + n/2) % n] = in[k]` per
/// axis.
fn fftshift(h: usize, w: usize, data: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let sy = (y + h / 2) % h;
        for x in 0..w {
            let sx = (x + w / 2) % w;
            out[sy * w + sx] = data[y * w + x];
        }
    }
    out
}

fn check_matrix(h: usize, w: usize, data: &[f64]) -> Result<()> {
    if h < 4 || w < 4 {
        return Err(ForensicsError::DegenerateSize { h, w });
    }
    if data.len() != h * w {
        return Err(ForensicsError::MatrixShape { h, w, got: data.len() });
    }
    Ok(())
}

// ── spectrum profile ────────────────────────────────────────────────────

/// Length of the 1D spectrum profile for images of width `w`.
pub fn spectrum_1d_len(w: usize) -> usize {
    w / 2 + 1
}

/// The forensic fingerprint of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumProfile {
    pub height: usize,
    pub width: usize,
    /// `log(1 + |2D-DFT|)` of the grayscale image, DC-centered, row-major
    /// `height x width`.
    pub spectrum_2d: Vec<f64>,
    /// Mean over rows of `log(1 + |1D-DFT(row)|)` at the `width/2 + 1`
    /// nonnegative frequencies.
    pub spectrum_1d: Vec<f64>,
}

/// Spectrum of a raw grayscale matrix.
pub fn log_spectrum_matrix(h: usize, w: usize, gray: &[f64]) -> Result<SpectrumProfile> {
    check_matrix(h, w, gray)?;
    let freq = dft2d(h, w, gray);
    let mags: Vec<f64> = freq.iter().map(|c| (1.0 + c.norm()).ln()).collect();
    let spectrum_2d = fftshift(h, w, &mags);

    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    let n1 = spectrum_1d_len(w);
    let mut spectrum_1d = vec![0.0; n1];
    let mut row = vec![Complex::new(0.0, 0.0); w];
    for y in 0..h {
        for x in 0..w {
            row[x] = Complex::new(gray[y * w + x], 0.0);
        }
        row_fft.process(&mut row);
        for k in 0..n1 {
            spectrum_1d[k] += (1.0 + row[k].norm()).ln();
        }
    }
    for v in &mut spectrum_1d {
        *v /= h as f64;
    }
    Ok(SpectrumProfile { height: h, width: w, spectrum_2d, spectrum_1d })
}

/// Spectrum of an image after fixed-luma grayscale conversion.
pub fn log_spectrum(image: &ImageBuffer) -> Result<SpectrumProfile> {
    log_spectrum_matrix(image.height(), image.width(), &image.to_gray())
}

// ── nyquist energy ratio ────────────────────────────────────────────────

fn energy_ratio(h: usize, w: usize, data: &[f64], horizontal_only: bool) -> Result<f64> {
    check_matrix(h, w, data)?;
    let freq = dft2d(h, w, data);
    let mut total = 0.0;
    let mut nyquist = 0.0;
    for fy in 0..h {
        for fx in 0..w {
            if fy == 0 && fx == 0 {
                continue; // DC excluded
            }
            let e = freq[fy * w + fx].norm_sqr();
            total += e;
            let on_row_nyquist = h % 2 == 0 && fy == h / 2;
            let on_col_nyquist = w % 2 == 0 && fx == w / 2;
            let hit = if horizontal_only {
                on_col_nyquist
            } else {
                on_row_nyquist || on_col_nyquist
            };
            if hit {
                nyquist += e;
            }
        }
    }
    // A constant image has no AC energy; anything at or below DFT rounding
    // noise is treated the same way.
    let dc = freq[0].norm_sqr();
    if total <= (dc + total) * 1e-18 {
        return Ok(0.0);
    }
    Ok(nyquist / total)
}

/// Fraction of the non-DC spectral energy carried by bins on the Nyquist row
/// or column of a raw matrix. Always in `[0, 1]`; 0 for constants.
pub fn nyquist_ratio_matrix(h: usize, w: usize, data: &[f64]) -> Result<f64> {
    energy_ratio(h, w, data, false)
}

/// As [`nyquist_ratio_matrix`], but counting only the horizontal Nyquist
/// (`fx = width/2`) bins — the column-direction artifact alone.
pub fn horizontal_nyquist_ratio(h: usize, w: usize, data: &[f64]) -> Result<f64> {
    energy_ratio(h, w, data, true)
}

/// Nyquist energy ratio of an image's grayscale plane.
pub fn nyquist_energy_ratio(image: &ImageBuffer) -> Result<f64> {
    nyquist_ratio_matrix(image.height(), image.width(), &image.to_gray())
}

// ── artifact report ─────────────────────────────────────────────────────

/// Scalar artifact score plus the prominent spectral peaks of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactReport {
    pub nyquist_energy_ratio: f64,
    /// Non-DC bins whose log-spectrum value exceeds every 8-connected
    /// neighbor and stands above the neighbor mean by the prominence
    /// threshold. Coordinates are ordinary (unshifted) DFT bin indices
    /// `(fy, fx)`, so a pure checkerboard peaks at `(h/2, w/2)`.
    pub peak_frequencies: Vec<(usize, usize)>,
}

/// Default log-scale prominence for [`artifact_report`].
pub const DEFAULT_PEAK_PROMINENCE: f64 = 2.0;

pub fn artifact_report(image: &ImageBuffer, prominence: f64) -> Result<ArtifactReport> {
    let profile = log_spectrum(image)?;
    let (h, w) = (profile.height, profile.width);
    let s = &profile.spectrum_2d;
    let mut peaks = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if y == h / 2 && x == w / 2 {
                continue; // DC sits at the center after the shift
            }
            let v = s[y * w + x];
            let mut neighbor_max = f64::NEG_INFINITY;
            let mut neighbor_sum = 0.0;
            for dy in [h - 1, 0, 1] {
                for dx in [w - 1, 0, 1] {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let n = s[((y + dy) % h) * w + (x + dx) % w];
                    neighbor_max = neighbor_max.max(n);
                    neighbor_sum += n;
                }
            }
            if v > neighbor_max && v - neighbor_sum / 8.0 >= prominence {
                // map back from the DC-centered layout to plain bin indices
                peaks.push(((y + h - h / 2) % h, (x + w - w / 2) % w));
            }
        }
    }
    peaks.sort();
    Ok(ArtifactReport {
        nyquist_energy_ratio: nyquist_energy_ratio(image)?,
        peak_frequencies: peaks,
    })
}

// ── detector ────────────────────────────────────────────────────────────

/// Detector output class. Fake is the negative class throughout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Real,
    Fake,
}

/// Logistic-regression training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub n_iterations: usize,
    pub learning_rate: f64,
    /// L2 penalty on the weights (not the bias).
    pub l2: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { n_iterations: 500, learning_rate: 0.5, l2: 1e-3 }
    }
}

/// A trained spectrum-feature detector: logistic regression over the 1D
/// horizontal spectrum, with the feature standardization constants captured
/// from its training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub height: usize,
    pub width: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl DetectorModel {
    fn check_image(&self, image: &ImageBuffer) -> Result<()> {
        if image.height() != self.height || image.width() != self.width {
            return Err(ForensicsError::MixedSizes {
                a: self.height,
                b: self.width,
                c: image.height(),
                d: image.width(),
            });
        }
        Ok(())
    }

    /// Score from a raw (unstandardized) feature vector: `sigmoid(w·x̂ + b)`
    /// where `x̂` is the stored standardization of `x`. Higher means more
    /// likely real.
    pub fn score_features(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.weights.len() {
            return Err(ForensicsError::FeatureLength {
                expected: self.weights.len(),
                got: features.len(),
                h: self.height,
                w: self.width,
            });
        }
        let mut z = self.bias;
        for i in 0..features.len() {
            z += self.weights[i] * (features[i] - self.feature_mean[i]) / self.feature_std[i];
        }
        Ok(sigmoid(z))
    }
}

fn features_of(image: &ImageBuffer) -> Result<Vec<f64>> {
    Ok(log_spectrum(image)?.spectrum_1d)
}

fn collect_features(
    reals: &[ImageBuffer],
    fakes: &[ImageBuffer],
) -> Result<(Vec<Vec<f64>>, Vec<f64>, usize, usize)> {
    let first = reals.first().or_else(|| fakes.first()).unwrap();
    let (h, w) = (first.height(), first.width());
    let mut xs = Vec::with_capacity(reals.len() + fakes.len());
    let mut ys = Vec::with_capacity(reals.len() + fakes.len());
    for (set, y) in [(reals, 1.0), (fakes, 0.0)] {
        for img in set {
            if img.height() != h || img.width() != w {
                return Err(ForensicsError::MixedSizes {
                    a: h,
                    b: w,
                    c: img.height(),
                    d: img.width(),
                });
            }
            xs.push(features_of(img)?);
            ys.push(y);
        }
    }
    Ok((xs, ys, h, w))
}

/// Trains the detector by full-batch gradient descent from zero weights.
/// Returns the model plus its accuracy on the training set. Deterministic:
/// no randomness is involved anywhere.
pub fn train_detector(
    reals: &[ImageBuffer],
    fakes: &[ImageBuffer],
    config: &DetectorConfig,
) -> Result<(DetectorModel, f64)> {
    if reals.is_empty() {
        return Err(ForensicsError::EmptySet("real training"));
    }
    if fakes.is_empty() {
        return Err(ForensicsError::EmptySet("fake training"));
    }
    let (xs, ys, h, w) = collect_features(reals, fakes)?;
    let n = xs.len();
    let f = xs[0].len();

    // standardize features with training-set statistics; near-constant
    // features get unit scale so they simply stop mattering
    let mut mean = vec![0.0; f];
    for x in &xs {
        for i in 0..f {
            mean[i] += x[i];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut std = vec![0.0; f];
    for x in &xs {
        for i in 0..f {
            std[i] += (x[i] - mean[i]).powi(2);
        }
    }
    for s in &mut std {
        *s = (*s / n as f64).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    let standardized: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| (0..f).map(|i| (x[i] - mean[i]) / std[i]).collect())
        .collect();

    let mut weights = vec![0.0; f];
    let mut bias = 0.0;
    for _ in 0..config.n_iterations {
        let mut gw = vec![0.0; f];
        let mut gb = 0.0;
        for (x, &y) in standardized.iter().zip(&ys) {
            let mut z = bias;
            for i in 0..f {
                z += weights[i] * x[i];
            }
            let err = sigmoid(z) - y;
            for i in 0..f {
                gw[i] += err * x[i];
            }
            gb += err;
        }
        for i in 0..f {
            weights[i] -= config.learning_rate * (gw[i] / n as f64 + config.l2 * weights[i]);
        }
        bias -= config.learning_rate * gb / n as f64;
    }

    let model = DetectorModel { height: h, width: w, weights, bias, feature_mean: mean, feature_std: std };
    let mut correct = 0usize;
    for (x, &y) in xs.iter().zip(&ys) {
        let score = model.score_features(x)?;
        let predicted_real = score >= 0.5;
        if predicted_real == (y == 1.0) {
            correct += 1;
        }
    }
    Ok((model, correct as f64 / n as f64))
}

/// Classifies one image. Score is `P(real)`; the exact tie `score = 0.5`
/// (e.g. from an untrained zero-weight model) labels real.
pub fn classify(model: &DetectorModel, image: &ImageBuffer) -> Result<(Label, f64)> {
    model.check_image(image)?;
    let score = model.score_features(&features_of(image)?)?;
    let label = if score < 0.5 { Label::Fake } else { Label::Real };
    Ok((label, score))
}

// ── detection report ────────────────────────────────────────────────────

/// Confusion counts over a real/fake query set, with fake as the negative
/// class: `acc = (n_tn + n_tp) / (n_qf + n_qr)` and `acc_fake = n_tn / n_qf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    /// fakes labeled fake (true negatives)
    pub n_tn: usize,
    /// reals labeled real (true positives)
    pub n_tp: usize,
    /// reals labeled fake
    pub n_fn: usize,
    /// fakes labeled real
    pub n_fp: usize,
    /// fake query count
    pub n_qf: usize,
    /// real query count
    pub n_qr: usize,
    pub acc: f64,
    pub acc_fake: f64,
}

impl DetectionReport {
    /// Builds a report from the two hit counts and the query-set sizes,
    /// deriving misses and both accuracies.
    pub fn from_counts(n_tn: usize, n_tp: usize, n_qf: usize, n_qr: usize) -> Result<Self> {
        if n_qf == 0 {
            return Err(ForensicsError::EmptySet("fake query"));
        }
        if n_tn > n_qf || n_tp > n_qr {
            return Err(ForensicsError::BadCounts(format!(
                "n_tn {n_tn} > n_qf {n_qf} or n_tp {n_tp} > n_qr {n_qr}"
            )));
        }
        Ok(Self {
            n_tn,
            n_tp,
            n_fn: n_qr - n_tp,
            n_fp: n_qf - n_tn,
            n_qf,
            n_qr,
            acc: (n_tn + n_tp) as f64 / (n_qf + n_qr) as f64,
            acc_fake: n_tn as f64 / n_qf as f64,
        })
    }
}

/// Runs the detector over both query sets and tallies the confusion matrix.
/// The fake set must be non-empty, otherwise `acc_fake` is undefined.
pub fn evaluate(
    model: &DetectorModel,
    reals: &[ImageBuffer],
    fakes: &[ImageBuffer],
) -> Result<DetectionReport> {
    if fakes.is_empty() {
        return Err(ForensicsError::EmptySet("fake query"));
    }
    let mut n_tp = 0usize;
    for img in reals {
        if classify(model, img)?.0 == Label::Real {
            n_tp += 1;
        }
    }
    let mut n_tn = 0usize;
    for img in fakes {
        if classify(model, img)?.0 == Label::Fake {
            n_tn += 1;
        }
    }
    DetectionReport::from_counts(n_tn, n_tp, fakes.len(), reals.len())
}

// ── exports ─────────────────────────────────────────────────────────────

/// Renders the 2D spectrum as an 8-bit binary PGM (P5), min–max normalized:
/// the smallest value maps to 0 and the largest to 255; a flat spectrum maps
/// to all zeros.
pub fn spectrum_2d_to_pgm(profile: &SpectrumProfile) -> Vec<u8> {
    let (h, w) = (profile.height, profile.width);
    let lo = profile.spectrum_2d.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = profile.spectrum_2d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        profile
            .spectrum_2d
            .iter()
            .map(|&v| ((v - lo) * scale).round().clamp(0.0, 255.0) as u8),
    );
    out
}

/// Raw 2D spectrum values as CSV: one row per line, full `f64` precision
/// (values re-parse exactly).
pub fn spectrum_2d_to_csv(profile: &SpectrumProfile) -> String {
    let mut out = String::new();
    for row in profile.spectrum_2d.chunks_exact(profile.width) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Parses [`spectrum_2d_to_csv`] output back into `(height, width, values)`.
pub fn spectrum_2d_from_csv(text: &str) -> Result<(usize, usize, Vec<f64>)> {
    let mut width = None;
    let mut values = Vec::new();
    let mut height = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|t| t.parse::<f64>()).collect();
        let row = row.map_err(|e| ForensicsError::Csv(format!("line {}: {e}", lineno + 1)))?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(ForensicsError::Csv(format!(
                    "line {}: expected {w} columns, got {}",
                    lineno + 1,
                    row.len()
                )));
            }
            _ => {}
        }
        values.extend(row);
        height += 1;
    }
    let width = width.ok_or_else(|| ForensicsError::Csv("no rows".into()))?;
    Ok((height, width, values))
}

/// 1D spectrum as `bin,value` CSV with a header line; full `f64` precision.
pub fn spectrum_1d_to_csv(profile: &SpectrumProfile) -> String {
    let mut out = String::from("bin,value\n");
    for (i, v) in profile.spectrum_1d.iter().enumerate() {
        out.push_str(&format!("{i},{v}\n"));
    }
    out
}

/// Parses [`spectrum_1d_to_csv`] output back into the value vector.
pub fn spectrum_1d_from_csv(text: &str) -> Result<Vec<f64>> {
    let mut values = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line != "bin,value" {
                return Err(ForensicsError::Csv(format!("bad header {line:?}")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let (bin, value) = line
            .split_once(',')
            .ok_or_else(|| ForensicsError::Csv(format!("line {}: missing comma", lineno + 1)))?;
        let bin: usize = bin
            .parse()
            .map_err(|e| ForensicsError::Csv(format!("line {}: {e}", lineno + 1)))?;
        if bin != values.len() {
            return Err(ForensicsError::Csv(format!(
                "line {}: bins out of order",
                lineno + 1
            )));
        }
        let v: f64 = value
            .parse()
            .map_err(|e| ForensicsError::Csv(format!("line {}: {e}", lineno + 1)))?;
        values.push(v);
    }
    Ok(values)
}

// ── tests ───────────────────────────────────────────────────────────────
