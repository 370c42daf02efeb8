//! Procedural stand-in dataset: every class has its own mean color and
//! texture family, so the classes are separable by construction.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::DEFAULT_CLASSES;
use crate::preprocess::{ImageTensor, RangeState};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot encode {path}: {source}")]
    Encode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("invalid synthetic spec: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub per_class: usize,
    pub seed: u64,
    pub size: usize,
    pub classes: Vec<String>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { per_class: 20, seed: 0, size: 64, classes: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect() }
    }
}

/// Mean colors, pairwise far apart in RGB.
const BASE_COLORS: [[f64; 3]; 10] = [
    [200.0, 40.0, 40.0],
    [40.0, 160.0, 40.0],
    [40.0, 60.0, 200.0],
    [220.0, 200.0, 40.0],
    [180.0, 60.0, 200.0],
    [40.0, 200.0, 200.0],
    [230.0, 130.0, 30.0],
    [120.0, 120.0, 120.0],
    [240.0, 170.0, 200.0],
    [90.0, 50.0, 20.0],
];

const COLOR_JITTER: f64 = 12.0;
const TEXTURE_AMPLITUDE: f64 = 35.0;
const PIXEL_NOISE: f64 = 8.0;

fn texture(family: usize, u: f64, v: f64, freq: f64, phase: f64, bumps: &[(f64, f64)]) -> f64 {
    match family % 10 {
        0 => (TAU * freq * v + phase).sin(),
        1 => (TAU * freq * u + phase).sin(),
        2 => (TAU * freq * (u + v) / 2.0 + phase).sin(),
        3 => {
            let cell = ((u * freq).floor() + (v * freq).floor()) as i64;
            if cell % 2 == 0 { 1.0 } else { -1.0 }
        }
        4 => {
            let r = ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt();
            (TAU * freq * r * 2.0 + phase).sin()
        }
        5 => {
            let s: f64 = bumps.iter().map(|(bx, by)| (-((u - bx).powi(2) + (v - by).powi(2)) / 0.01).exp()).sum();
            2.0 * s.min(1.0) - 0.5
        }
        6 => {
            let (fu, fv) = ((u * freq + phase).fract() - 0.5, (v * freq).fract() - 0.5);
            if fu * fu + fv * fv < 0.06 { 1.5 } else { -0.3 }
        }
        7 => 0.0,
        8 => 1.0 - 4.0 * ((u - 0.5).powi(2) + (v - 0.5).powi(2)),
        _ => (TAU * freq * u + phase).sin() * (TAU * freq * v).sin() * 1.5,
    }
}

/// One frame of class `class`, drawing its variation from `rng`.
pub fn render_frame<R: Rng + ?Sized>(class: usize, size: usize, rng: &mut R) -> ImageTensor {
    let base = BASE_COLORS[class % BASE_COLORS.len()];
    let tint: Vec<f64> = base.iter().map(|b| b + rng.random_range(-COLOR_JITTER..=COLOR_JITTER)).collect();
    let freq = rng.random_range(3.0..6.0);
    let phase = rng.random_range(0.0..TAU);
    let bumps: Vec<(f64, f64)> = (0..4).map(|_| (rng.random_range(0.1..0.9), rng.random_range(0.1..0.9))).collect();
    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
            let t = TEXTURE_AMPLITUDE * texture(class, u, v, freq, phase, &bumps);
            for c in 0..3 {
                let noise = if class % 10 == 7 { 4.0 * PIXEL_NOISE } else { PIXEL_NOISE };
                let val = tint[c] + t + rng.random_range(-noise..=noise);
                data[c * plane + y * size + x] = val.clamp(0.0, 255.0).round();
            }
        }
    }
    ImageTensor::from_raw(size, size, data, RangeState::Raw)
}

fn class_rng(seed: u64, class: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(class as u64);
    rng
}

/// All frames in memory, class by class.
pub fn generate(spec: &SynthSpec) -> Vec<(usize, ImageTensor)> {
    let mut out = Vec::with_capacity(spec.per_class * spec.classes.len());
    for class in 0..spec.classes.len() {
        let mut rng = class_rng(spec.seed, class);
        for _ in 0..spec.per_class {
            out.push((class, render_frame(class, spec.size, &mut rng)));
        }
    }
    out
}

fn to_rgb8(img: &ImageTensor) -> image::RgbImage {
    let (h, w) = (img.height(), img.width());
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| img.at(c, y as usize, x as usize) as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Writes `root/<class>/<class>_<i>.png` and returns the files in order.
pub fn write_dataset(root: &Path, spec: &SynthSpec) -> Result<Vec<PathBuf>, SynthError> {
    if spec.classes.len() > BASE_COLORS.len() {
        return Err(SynthError::Invalid(format!("at most {} classes", BASE_COLORS.len())));
    }
    if spec.per_class == 0 || spec.size == 0 {
        return Err(SynthError::Invalid("per_class and size must be positive".into()));
    }
    let mut written = Vec::new();
    let mut counters = vec![0usize; spec.classes.len()];
    for (class, img) in generate(spec) {
        let name = &spec.classes[class];
        let dir = root.join(name);
        if counters[class] == 0 {
            std::fs::create_dir_all(&dir).map_err(|source| SynthError::Io { path: dir.clone(), source })?;
        }
        let file = dir.join(format!("{}_{:04}.png", name.replace(' ', "_"), counters[class]));
        counters[class] += 1;
        to_rgb8(&img).save(&file).map_err(|source| SynthError::Encode { path: file.clone(), source })?;
        written.push(file);
    }
    Ok(written)
}

/// Per-channel mean of an image.
pub fn mean_color(img: &ImageTensor) -> [f64; 3] {
    let n = (img.height() * img.width()) as f64;
    std::array::from_fn(|c| img.plane(c).iter().sum::<f64>() / n)
}

/// Resubstitution accuracy of a nearest-centroid classifier on mean colors.
pub fn nearest_centroid_accuracy(images: &[ImageTensor], labels: &[usize]) -> f64 {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let feats: Vec<[f64; 3]> = images.iter().map(mean_color).collect();
    let mut centroids = vec![[0.0; 3]; k];
    let mut counts = vec![0usize; k];
    for (f, &l) in feats.iter().zip(labels) {
        counts[l] += 1;
        for c in 0..3 {
            centroids[l][c] += f[c];
        }
    }
    for (cent, &n) in centroids.iter_mut().zip(&counts) {
        cent.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let d2 = |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>();
    let correct = feats
        .iter()
        .zip(labels)
        .filter(|(f, &l)| {
            let best = (0..k).filter(|&j| counts[j] > 0).min_by(|&a, &b| d2(f, &centroids[a]).total_cmp(&d2(f, &centroids[b])));
            best == Some(l)
        })
        .count();
    correct as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classes_are_separable_by_mean_color() {
        let spec = SynthSpec { per_class: 10, seed: 7, ..Default::default() };
        let (labels, images): (Vec<usize>, Vec<ImageTensor>) = generate(&spec).into_iter().unzip();
        assert!(nearest_centroid_accuracy(&images, &labels) >= 0.9);
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = SynthSpec { per_class: 2, seed: 3, size: 16, ..Default::default() };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let fa = write_dataset(a.path(), &spec).unwrap();
        let fb = write_dataset(b.path(), &spec).unwrap();
        assert_eq!(fa.len(), 20);
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
        let other = generate(&SynthSpec { seed: 4, ..spec.clone() });
        assert_ne!(other[0].1, generate(&spec)[0].1);
    }

    #[test]
    fn pixels_are_valid_bytes() {
        let mut rng = class_rng(1, 0);
        for class in 0..10 {
            let img = render_frame(class, 24, &mut rng);
            assert!(img.data().iter().all(|&v| (0.0..=255.0).contains(&v) && v.fract() == 0.0));
        }
    }
}
