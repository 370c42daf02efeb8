//! Image tensors and the resize / augment / normalize pipeline.
//!
//! Pipeline order is fixed: load, resize, (train only) horizontal flip then
//! rotation, scale to [0, 1], per-channel standardization. Each train sample
//! consumes exactly two random draws (flip, angle) regardless of outcome.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{load_image, DatasetError, LabeledFrame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RangeState {
    /// Values in [0, 255].
    Raw,
    /// Values in [0, 1].
    Unit,
    /// Standardized, finite.
    Normalized,
}

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("expected range state {expected:?}, found {found:?}")]
    WrongRangeState { expected: RangeState, found: RangeState },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// A C×H×W image stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
    range: RangeState,
}

impl ImageTensor {
    /// Three-channel image from channel-major data.
    pub fn from_raw(height: usize, width: usize, data: Vec<f64>, range: RangeState) -> Self {
        Self::new(3, height, width, data, range)
    }

    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>, range: RangeState) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "image dims must be positive");
        assert_eq!(data.len(), channels * height * width, "data length does not match dims");
        Self { channels, height, width, data, range }
    }

    pub fn filled(height: usize, width: usize, value: f64, range: RangeState) -> Self {
        Self::from_raw(height, width, vec![value; 3 * height * width], range)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
    pub fn range_state(&self) -> RangeState {
        self.range
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Bilinear sample of channel `c` at continuous coordinates, or `None`
    /// if the point lies outside the pixel-center grid.
    fn sample(&self, c: usize, y: f64, x: f64) -> Option<f64> {
        let (h, w) = (self.height as f64, self.width as f64);
        if !(y >= 0.0 && y <= h - 1.0 && x >= 0.0 && x <= w - 1.0) {
            return None;
        }
        Some(bilinear(self.plane(c), self.width, self.height, y, x))
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Bilinear interpolation with edge clamping; `y`, `x` already inside the grid.
fn bilinear(plane: &[f64], width: usize, height: usize, y: f64, x: f64) -> f64 {
    let y0 = (y.floor() as usize).min(height - 1);
    let x0 = (x.floor() as usize).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let ty = y - y0 as f64;
    let tx = x - x0 as f64;
    let top = lerp(plane[y0 * width + x0], plane[y0 * width + x1], tx);
    let bottom = lerp(plane[y1 * width + x0], plane[y1 * width + x1], tx);
    lerp(top, bottom, ty)
}

/// Bilinear resize using half-pixel centers. Identity when the size matches.
pub fn resize(img: &ImageTensor, height: usize, width: usize) -> ImageTensor {
    assert!(height > 0 && width > 0, "target size must be positive");
    if height == img.height && width == img.width {
        return img.clone();
    }
    let sy = img.height as f64 / height as f64;
    let sx = img.width as f64 / width as f64;
    let clamp = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64);
    let ys: Vec<f64> = (0..height).map(|y| clamp((y as f64 + 0.5) * sy - 0.5, img.height)).collect();
    let xs: Vec<f64> = (0..width).map(|x| clamp((x as f64 + 0.5) * sx - 0.5, img.width)).collect();
    let mut data = Vec::with_capacity(img.channels * height * width);
    for c in 0..img.channels {
        let plane = img.plane(c);
        for &y in &ys {
            for &x in &xs {
                data.push(bilinear(plane, img.width, img.height, y, x));
            }
        }
    }
    ImageTensor::new(img.channels, height, width, data, img.range)
}

/// Maps a raw [0, 255] image to [0, 1].
pub fn to_unit(img: &ImageTensor) -> Result<ImageTensor, PreprocessError> {
    expect_state(img, RangeState::Raw)?;
    let data = img.data.iter().map(|v| v / 255.0).collect();
    Ok(ImageTensor { data, range: RangeState::Unit, ..img.clone_dims() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizationStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for NormalizationStats {
    fn default() -> Self {
        Self { mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225] }
    }
}

impl NormalizationStats {
    pub fn validate(&self) -> Result<(), String> {
        if self.std.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(format!("normalize.std must be positive, got {:?}", self.std));
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            return Err(format!("normalize.mean must be finite, got {:?}", self.mean));
        }
        Ok(())
    }
}

/// Per-channel standardization of a unit-range image.
pub fn normalize(img: &ImageTensor, stats: &NormalizationStats) -> Result<ImageTensor, PreprocessError> {
    expect_state(img, RangeState::Unit)?;
    assert_eq!(img.channels, 3, "normalization stats are defined for 3 channels");
    let plane = img.height * img.width;
    let data = img
        .data
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let c = i / plane;
            (v - stats.mean[c]) / stats.std[c]
        })
        .collect();
    Ok(ImageTensor { data, range: RangeState::Normalized, ..img.clone_dims() })
}

fn expect_state(img: &ImageTensor, expected: RangeState) -> Result<(), PreprocessError> {
    if img.range != expected {
        return Err(PreprocessError::WrongRangeState { expected, found: img.range });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub hflip_prob: f64,
    pub rotation_max_deg: f64,
    pub enabled: bool,
    /// Derived from the run seed; not part of the config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self { hflip_prob: 0.5, rotation_max_deg: 10.0, enabled: true, seed: 0 }
    }
}

/// Independent RNG for one sample in one epoch: seed ⊕ index, stream = epoch.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index);
    rng.set_stream(epoch);
    rng
}

/// Reverses the width axis.
pub fn hflip(img: &ImageTensor) -> ImageTensor {
    let mut data = Vec::with_capacity(img.data.len());
    for row in img.data.chunks_exact(img.width) {
        data.extend(row.iter().rev());
    }
    ImageTensor { data, ..img.clone_dims() }
}

/// Flips with probability `hflip_prob`. Always consumes one draw.
pub fn random_horizontal_flip<R: Rng + ?Sized>(img: &ImageTensor, policy: &AugmentationPolicy, rng: &mut R) -> ImageTensor {
    let u: f64 = rng.random();
    if u < policy.hflip_prob {
        hflip(img)
    } else {
        img.clone()
    }
}

/// Rotation about the image center by `degrees` (counter-clockwise in image
/// display coordinates), bilinear, zero fill outside the source.
pub fn rotate(img: &ImageTensor, degrees: f64) -> ImageTensor {
    if degrees == 0.0 {
        return img.clone();
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (img.height as f64 - 1.0) / 2.0;
    let cx = (img.width as f64 - 1.0) / 2.0;
    let mut data = Vec::with_capacity(img.data.len());
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                // inverse map: rotate the output offset back by -θ
                let sx = cos * dx - sin * dy + cx;
                let sy = sin * dx + cos * dy + cy;
                data.push(img.sample(c, sy, sx).unwrap_or(0.0));
            }
        }
    }
    ImageTensor { data, ..img.clone_dims() }
}

/// Rotates by θ ~ U[-max, max] degrees. Always consumes one draw.
pub fn random_rotation<R: Rng + ?Sized>(img: &ImageTensor, policy: &AugmentationPolicy, rng: &mut R) -> ImageTensor {
    let u: f64 = rng.random();
    let theta = (2.0 * u - 1.0) * policy.rotation_max_deg;
    rotate(img, theta)
}

impl ImageTensor {
    fn clone_dims(&self) -> ImageTensor {
        ImageTensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: Vec::new(),
            range: self.range,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Val,
}

/// Preprocessing parameters shared by training, evaluation and prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub input_size: usize,
    pub stats: NormalizationStats,
    pub augment: AugmentationPolicy,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { input_size: 224, stats: NormalizationStats::default(), augment: AugmentationPolicy::default() }
    }
}

impl PipelineConfig {
    /// Steps after decoding and resizing: augmentation (train only) and scaling.
    pub fn finish<R: Rng + ?Sized>(&self, resized: &ImageTensor, phase: Phase, rng: &mut R) -> ImageTensor {
        let img = if phase == Phase::Train && self.augment.enabled {
            let flipped = random_horizontal_flip(resized, &self.augment, rng);
            random_rotation(&flipped, &self.augment, rng)
        } else {
            resized.clone()
        };
        let unit = to_unit(&img).expect("resized images are raw");
        normalize(&unit, &self.stats).expect("unit images normalize")
    }

    pub fn load_resized(&self, frame: &LabeledFrame) -> Result<ImageTensor, DatasetError> {
        let raw = load_image(&frame.path)?;
        Ok(resize(&raw, self.input_size, self.input_size))
    }
}

/// Full per-frame pipeline. `rng` is only consulted for the train phase.
pub fn apply_pipeline<R: Rng + ?Sized>(
    frame: &LabeledFrame,
    phase: Phase,
    config: &PipelineConfig,
    rng: &mut R,
) -> Result<(ImageTensor, usize), PreprocessError> {
    let resized = config.load_resized(frame)?;
    Ok((config.finish(&resized, phase, rng), frame.label))
}

/// Decoded and resized (still raw-range) images of one split, kept in memory
/// so that augmentation can be re-drawn every epoch without re-decoding.
#[derive(Debug, Clone)]
pub struct PreparedSplit {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
    pub paths: Vec<std::path::PathBuf>,
}

impl PreparedSplit {
    pub fn load(frames: &[LabeledFrame], config: &PipelineConfig) -> Result<Self, DatasetError> {
        let mut images = Vec::with_capacity(frames.len());
        for f in frames {
            images.push(config.load_resized(f)?);
        }
        Ok(Self {
            images,
            labels: frames.iter().map(|f| f.label).collect(),
            paths: frames.iter().map(|f| f.path.clone()).collect(),
        })
    }

    /// In-memory split; images must already be raw and resized.
    pub fn from_images(images: Vec<ImageTensor>, labels: Vec<usize>) -> Self {
        assert_eq!(images.len(), labels.len(), "one label per image");
        let paths = (0..images.len()).map(|i| format!("<memory:{i}>").into()).collect();
        Self { images, labels, paths }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Model-ready tensors for `indices`. Train-phase samples draw their
    /// augmentation from `sample_rng(augment.seed, epoch, index)`.
    pub fn batch(&self, indices: &[usize], phase: Phase, config: &PipelineConfig, epoch: u64) -> (crate::nn::Tensor, Vec<usize>) {
        let processed: Vec<ImageTensor> = indices
            .iter()
            .map(|&i| {
                let mut rng = sample_rng(config.augment.seed, epoch, i as u64);
                config.finish(&self.images[i], phase, &mut rng)
            })
            .collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (crate::nn::Tensor::from_images(&processed), labels)
    }
}
