//! Image buffers, synthetic two-domain datasets, and image file I/O.
//!
//! Images are stored as interleaved RGB with values in `[0, 1]`. The model
//! consumes planar NCHW tensors in `[-1, 1]`; [`to_model_input`] and
//! [`from_model_output`] convert between the two conventions.
//!
//! The synthetic dataset draws two visually distinct families of blob
//! pictures — domain A is red discs on a textured green background, domain B
//! is orange discs on a textured blue background — so that an
//! image-translation model has an actual color/shape mapping to learn while
//! everything stays small enough to train in a test suite. Every image is a
//! pure function of `(seed, domain, split, index)`, so regenerating a dataset
//! is always bitwise identical and train/test splits can never overlap.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, TensorError};

/// Errors from dataset synthesis and image I/O.
#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported or corrupt image file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("invalid image data: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, DataError>;

// ── image buffer ────────────────────────────────────────────────────────

/// An RGB image with `f64` samples in `[0, 1]`, stored row-major interleaved
/// (`data[(y*width + x)*3 + channel]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    /// Builds an image, validating dimensions, length, and value range.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(DataError::Invalid(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(DataError::Invalid(format!(
                "expected {}x{}x3 = {} samples, got {}",
                height,
                width,
                height * width * 3,
                data.len()
            )));
        }
        for (i, v) in data.iter().enumerate() {
            if !v.is_finite() || *v < 0.0 || *v > 1.0 {
                return Err(DataError::Invalid(format!(
                    "sample {i} = {v} outside [0, 1]"
                )));
            }
        }
        Ok(Self { height, width, data })
    }

    /// An image filled with a single color.
    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Interleaved RGB samples in `[0, 1]`.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Sample at `(y, x)`, channel `c` (0 = R, 1 = G, 2 = B).
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// Grayscale plane via fixed luma weights (0.299, 0.587, 0.114).
    pub fn to_gray(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|px| 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2])
            .collect()
    }

    /// Mean of one channel over all pixels.
    pub fn channel_mean(&self, c: usize) -> f64 {
        let n = (self.height * self.width) as f64;
        self.data.chunks_exact(3).map(|px| px[c]).sum::<f64>() / n
    }
}

// ── model-range conversion ──────────────────────────────────────────────

/// Affine map from storage range `[0, 1]` to model range `[-1, 1]`.
pub fn normalize_value(v: f64) -> f64 {
    v * 2.0 - 1.0
}

/// Inverse of [`normalize_value`], clamped back into `[0, 1]` so that
/// slightly out-of-range model outputs still yield valid images.
pub fn denormalize_value(v: f64) -> f64 {
    ((v + 1.0) * 0.5).clamp(0.0, 1.0)
}

/// Packs images into one NCHW tensor in model range. All images must share
/// the same dimensions.
pub fn to_model_input(images: &[ImageBuffer]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| DataError::Invalid("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for (i, img) in images.iter().enumerate() {
        if img.height != h || img.width != w {
            return Err(DataError::Invalid(format!(
                "batch image {i} is {}x{}, expected {h}x{w}",
                img.height, img.width
            )));
        }
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(normalize_value(img.get(y, x, c)));
                }
            }
        }
    }
    Ok(Tensor::new(vec![images.len(), 3, h, w], data)?)
}

/// Unpacks an NCHW model-range tensor back into images, clamping to `[0, 1]`.
pub fn from_model_output(shape: &[usize], data: &[f64]) -> Result<Vec<ImageBuffer>> {
    if shape.len() != 4 || shape[1] != 3 {
        return Err(DataError::Invalid(format!(
            "expected an Nx3xHxW tensor, got shape {shape:?}"
        )));
    }
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    if data.len() != n * 3 * h * w {
        return Err(DataError::Invalid(format!(
            "shape {shape:?} wants {} samples, got {}",
            n * 3 * h * w,
            data.len()
        )));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let base = i * 3 * plane;
        let mut rgb = vec![0.0; plane * 3];
        for c in 0..3 {
            for p in 0..plane {
                rgb[p * 3 + c] = denormalize_value(data[base + c * plane + p]);
            }
        }
        out.push(ImageBuffer::new(h, w, rgb)?);
    }
    Ok(out)
}

// ── synthetic dataset ───────────────────────────────────────────────────

/// Visual recipe for one domain of blob images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    /// Base background color.
    pub background: [f64; 3],
    /// Blob (disc) color.
    pub blob: [f64; 3],
    /// Blob radius as a fraction of the image side, sampled per image.
    pub radius_range: (f64, f64),
    /// Amplitude of the sinusoidal background texture.
    pub texture_amp: f64,
    /// Per-pixel uniform noise amplitude.
    pub noise_amp: f64,
}

/// Synthetic dataset recipe: image size, per-domain counts, and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub domain_a: DomainSpec,
    pub domain_b: DomainSpec,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            n_train: 80,
            n_test: 50,
            seed: 7,
            domain_a: DomainSpec {
                background: [0.16, 0.42, 0.20],
                blob: [0.85, 0.10, 0.10],
                radius_range: (0.30, 0.42),
                texture_amp: 0.05,
                noise_amp: 0.02,
            },
            domain_b: DomainSpec {
                background: [0.20, 0.24, 0.42],
                blob: [0.95, 0.60, 0.05],
                radius_range: (0.16, 0.26),
                texture_amp: 0.05,
                noise_amp: 0.02,
            },
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 4 {
            return Err(DataError::Invalid(format!(
                "image_size must be at least 4, got {}",
                self.image_size
            )));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(DataError::Invalid(
                "n_train and n_test must be at least 1".into(),
            ));
        }
        for d in [&self.domain_a, &self.domain_b] {
            let (lo, hi) = d.radius_range;
            if !(0.0 < lo && lo <= hi && hi < 0.5) {
                return Err(DataError::Invalid(format!(
                    "radius_range must satisfy 0 < lo <= hi < 0.5, got ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }
}

/// The four conventional unpaired-translation splits.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub train_a: Vec<ImageBuffer>,
    pub train_b: Vec<ImageBuffer>,
    pub test_a: Vec<ImageBuffer>,
    pub test_b: Vec<ImageBuffer>,
}

/// SplitMix64 step, used to fold identifying integers into one RNG seed.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn image_seed(seed: u64, domain: u64, split: u64, index: u64) -> u64 {
    mix(mix(mix(mix(seed) ^ domain) ^ split.wrapping_mul(0x0123_4567_89ab_cdef)) ^ index)
}

/// Smooth 0→1 ramp used for the soft blob edge.
fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Renders one blob image from its own RNG stream.
fn render_image(size: usize, domain: &DomainSpec, rng: &mut ChaCha8Rng) -> ImageBuffer {
    let s = size as f64;
    let radius = rng.gen_range(domain.radius_range.0..=domain.radius_range.1) * s;
    // keep the whole disc on-canvas; on tiny canvases where that is
    // impossible, fall back to roughly centered placement
    let margin = (radius + 1.0).min((s - 1.0) * 0.5);
    let cx = rng.gen_range(margin..s - margin);
    let cy = rng.gen_range(margin..s - margin);
    // background texture: two low-frequency sinusoids with random phase and
    // a random (low) spatial frequency, so real images have varied spectra
    let fy = rng.gen_range(1.0..3.5);
    let fx = rng.gen_range(1.0..3.5);
    let py = rng.gen_range(0.0..std::f64::consts::TAU);
    let px = rng.gen_range(0.0..std::f64::consts::TAU);
    let edge = 1.5; // soft-edge width in pixels

    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let tex = domain.texture_amp
                * ((std::f64::consts::TAU * fy * y as f64 / s + py).sin()
                    + (std::f64::consts::TAU * fx * x as f64 / s + px).sin())
                * 0.5;
            let dist = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            let inside = smoothstep((radius - dist) / edge + 0.5);
            // slight radial shading inside the blob so it is not flat
            let shade = 1.0 - 0.15 * (dist / radius).min(1.0);
            for c in 0..3 {
                let bg = domain.background[c] + tex;
                let fg = domain.blob[c] * shade;
                let noise = domain.noise_amp * rng.gen_range(-1.0..1.0);
                let v = bg * (1.0 - inside) + fg * inside + noise;
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    ImageBuffer::new(size, size, data).expect("rendered samples are clamped to [0, 1]")
}

fn render_split(spec: &SyntheticSpec, domain_tag: u64, split_tag: u64, n: usize) -> Vec<ImageBuffer> {
    let domain = if domain_tag == 0 { &spec.domain_a } else { &spec.domain_b };
    (0..n)
        .map(|i| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(image_seed(spec.seed, domain_tag, split_tag, i as u64));
            render_image(spec.image_size, domain, &mut rng)
        })
        .collect()
}

/// Generates all four splits. Pure function of `spec`: the same settings
/// always produce bitwise-identical images, and each (domain, split, index)
/// triple has its own RNG stream, so splits are disjoint by construction.
pub fn synth_dataset(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    Ok(SyntheticDataset {
        train_a: render_split(spec, 0, 0, spec.n_train),
        train_b: render_split(spec, 1, 0, spec.n_train),
        test_a: render_split(spec, 0, 1, spec.n_test),
        test_b: render_split(spec, 1, 1, spec.n_test),
    })
}

// ── file I/O ────────────────────────────────────────────────────────────

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn to_rgb8(image: &ImageBuffer) -> Vec<u8> {
    image.data.iter().map(|&v| quantize(v)).collect()
}

fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<ImageBuffer> {
    let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
    ImageBuffer::new(height, width, data)
}

/// Saves as 8-bit RGB; the format is chosen by extension (`.png` or `.ppm`).
pub fn save_image(image: &ImageBuffer, path: &Path) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => save_png(image, path),
        Some("ppm") => save_ppm(image, path),
        other => Err(DataError::Format {
            path: path.to_path_buf(),
            reason: format!("unsupported extension {other:?}; use .png or .ppm"),
        }),
    }
}

/// Loads a PNG or binary PPM (P6), sniffing the format from magic bytes.
pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        load_png_bytes(&bytes, path)
    } else if bytes.starts_with(b"P6") {
        load_ppm_bytes(&bytes, path)
    } else {
        Err(DataError::Format {
            path: path.to_path_buf(),
            reason: "not a PNG or binary PPM (P6) file".into(),
        })
    }
}

fn save_png(image: &ImageBuffer, path: &Path) -> Result<()> {
    let rgb = to_rgb8(image);
    image::save_buffer(
        path,
        &rgb,
        image.width as u32,
        image.height as u32,
        image::ColorType::Rgb8,
    )
    .map_err(|e| DataError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn load_png_bytes(bytes: &[u8], path: &Path) -> Result<ImageBuffer> {
    let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| DataError::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .into_rgb8();
    from_rgb8(decoded.height() as usize, decoded.width() as usize, decoded.as_raw())
}

fn save_ppm(image: &ImageBuffer, path: &Path) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let header = format!("P6\n{} {}\n255\n", image.width, image.height);
    let body = to_rgb8(image);
    file.write_all(header.as_bytes())
        .and_then(|_| file.write_all(&body))
        .map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn load_ppm_bytes(bytes: &[u8], path: &Path) -> Result<ImageBuffer> {
    let err = |reason: &str| DataError::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut cursor = std::io::Cursor::new(bytes);
    // header: magic, width, height, maxval — whitespace separated, with
    // optional '#' comment lines
    let mut fields = Vec::with_capacity(4);
    let mut token = Vec::new();
    let mut in_comment = false;
    while fields.len() < 4 {
        let mut byte = [0u8; 1];
        if cursor.read(&mut byte).map_err(|_| err("truncated header"))? == 0 {
            return Err(err("truncated header"));
        }
        let b = byte[0];
        if in_comment {
            in_comment = b != b'\n';
        } else if b == b'#' {
            in_comment = true;
        } else if b.is_ascii_whitespace() {
            if !token.is_empty() {
                fields.push(String::from_utf8_lossy(&token).into_owned());
                token.clear();
            }
        } else {
            token.push(b);
        }
    }
    if fields[0] != "P6" {
        return Err(err("not a P6 PPM"));
    }
    let width: usize = fields[1].parse().map_err(|_| err("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| err("bad height"))?;
    if fields[3] != "255" {
        return Err(err("only maxval 255 is supported"));
    }
    if width == 0 || height == 0 {
        return Err(err("zero image dimension"));
    }
    let mut body = vec![0u8; width * height * 3];
    cursor
        .read_exact(&mut body)
        .map_err(|_| err("truncated pixel data"))?;
    from_rgb8(height, width, &body)
}

/// Writes a dataset in the conventional unpaired-translation directory
/// layout: `root/{trainA,trainB,testA,testB}/img_NNNN.png`.
pub fn write_dataset(dataset: &SyntheticDataset, root: &Path) -> Result<()> {
    let splits: [(&str, &[ImageBuffer]); 4] = [
        ("trainA", &dataset.train_a),
        ("trainB", &dataset.train_b),
        ("testA", &dataset.test_a),
        ("testB", &dataset.test_b),
    ];
    for (name, images) in splits {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|source| DataError::Io {
            path: dir.clone(),
            source,
        })?;
        for (i, img) in images.iter().enumerate() {
            save_image(img, &dir.join(format!("img_{i:04}.png")))?;
        }
    }
    Ok(())
}

/// Loads every `.png`/`.ppm` in a directory, sorted by file name so the
/// resulting order is stable across platforms.
pub fn load_dir(dir: &Path) -> Result<Vec<ImageBuffer>> {
    let entries = fs::read_dir(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png") | Some("ppm")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(DataError::Format {
            path: dir.to_path_buf(),
            reason: "no .png or .ppm files found".into(),
        });
    }
    paths.iter().map(|p| load_image(p)).collect()
}

// ── tests ───────────────────────────────────────────────────────────────
