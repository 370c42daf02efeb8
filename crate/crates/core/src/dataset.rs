//! Labeled-frame discovery, manifests and stratified train/validation splits.
//!
//! The on-disk layout is one subdirectory per class under a root directory:
//!
//! ```text
//! root/
//!   Bleeding/  frame_0001.png ...
//!   Normal/    frame_0001.jpg ...
//! ```
//!
//! Class indices are the position of the class name in the lexicographically
//! sorted name list, so they never depend on directory traversal order.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::{ImageTensor, RangeState};

/// The ten Capsule Vision 2024 abnormality classes.
pub const DEFAULT_CLASSES: [&str; 10] = [
    "Angioectasia",
    "Bleeding",
    "Erosion",
    "Erythema",
    "Foreign Body",
    "Lymphangiectasia",
    "Normal",
    "Polyp",
    "Ulcer",
    "Worms",
];

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("class directory `{0}` contains no readable images")]
    EmptyClass(String),
    #[error("directory `{0}` does not name a class in the configured class set")]
    UnknownClassDir(String),
    #[error("unreadable image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },
    #[error("class `{class}` has {count} frame(s); at least 2 are needed to split")]
    TooFewSamples { class: String, count: usize },
    #[error("invalid class set: {0}")]
    InvalidClassSet(String),
    #[error("invalid split spec: {0}")]
    InvalidSplit(String),
    #[error("manifest csv: {0}")]
    Manifest(String),
    #[error("dataset root {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Ordered set of class names. Index = lexicographic rank of the name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ClassSet {
    names: Vec<String>,
}

impl ClassSet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self, DatasetError> {
        let mut names: Vec<String> = names.into_iter().map(Into::into).collect();
        names.sort();
        if names.len() < 2 {
            return Err(DatasetError::InvalidClassSet(format!(
                "need at least 2 classes, got {}",
                names.len()
            )));
        }
        if let Some(empty) = names.iter().find(|n| n.trim().is_empty()) {
            return Err(DatasetError::InvalidClassSet(format!("empty class name {empty:?}")));
        }
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(DatasetError::InvalidClassSet(format!("duplicate class name `{}`", w[0])));
        }
        Ok(Self { names })
    }

    pub fn default_challenge() -> Self {
        Self::new(DEFAULT_CLASSES).expect("default classes are valid")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.binary_search_by(|n| n.as_str().cmp(name)).ok()
    }
}

impl TryFrom<Vec<String>> for ClassSet {
    type Error = DatasetError;

    fn try_from(names: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(names)
    }
}

impl From<ClassSet> for Vec<String> {
    fn from(set: ClassSet) -> Self {
        set.names
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "" | "unassigned" => Ok(Split::Unassigned),
            other => Err(DatasetError::Manifest(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledFrame {
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
}

/// A file that looked like an image but could not be decoded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub class_set: ClassSet,
    pub frames: Vec<LabeledFrame>,
    pub seed: u64,
    /// Files skipped during the scan. Not serialized.
    pub skipped: Vec<SkippedFile>,
}

impl DatasetManifest {
    pub fn frames_in(&self, split: Split) -> Vec<LabeledFrame> {
        self.frames.iter().filter(|f| f.split == split).cloned().collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_set.len()];
        for f in &self.frames {
            counts[f.label] += 1;
        }
        counts
    }

    /// Writes the `path,label,split` CSV. Labels are written as class names.
    pub fn write_csv(&self, path: &Path) -> Result<(), DatasetError> {
        let csv_err = |e: csv::Error| DatasetError::Manifest(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["path", "label", "split"]).map_err(csv_err)?;
        for f in &self.frames {
            let p = f.path.to_string_lossy();
            w.write_record([p.as_ref(), self.class_set.name(f.label), f.split.as_str()]).map_err(csv_err)?;
        }
        w.flush().map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })
    }

    /// Reads a `path,label,split` CSV. `label` may be a class name or an index
    /// into `class_set`. Without a class set, names found in the file define it.
    /// Relative paths are resolved against the CSV's directory.
    pub fn read_csv(path: &Path, class_set: Option<ClassSet>) -> Result<Self, DatasetError> {
        let csv_err = |e: csv::Error| DatasetError::Manifest(format!("{}: {e}", path.display()));
        let base = path.parent().unwrap_or(Path::new("."));
        let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
        let header = reader.headers().map_err(csv_err)?;
        if header.iter().map(str::trim).ne(["path", "label", "split"]) {
            return Err(DatasetError::Manifest(format!("expected header `path,label,split`, found {header:?}")));
        }
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(csv_err)?;
            let split: Split = record[2].trim().parse()?;
            rows.push((record[0].to_string(), record[1].to_string(), split));
        }
        let class_set = match class_set {
            Some(set) => set,
            None => {
                let mut names: Vec<String> = rows.iter().map(|r| r.1.clone()).collect();
                names.sort();
                names.dedup();
                ClassSet::new(names)?
            }
        };
        let mut frames = Vec::with_capacity(rows.len());
        for (p, label, split) in rows {
            let label = match class_set.index_of(&label) {
                Some(i) => i,
                None => match label.parse::<usize>() {
                    Ok(i) if i < class_set.len() => i,
                    _ => return Err(DatasetError::UnknownClassDir(label)),
                },
            };
            let p = PathBuf::from(p);
            let path = if p.is_relative() { base.join(p) } else { p };
            frames.push(LabeledFrame { path, label, split });
        }
        let manifest = DatasetManifest { class_set, frames, seed: 0, skipped: Vec::new() };
        for (c, &n) in manifest.class_counts().iter().enumerate() {
            if n == 0 {
                return Err(DatasetError::EmptyClass(manifest.class_set.name(c).to_string()));
            }
        }
        Ok(manifest)
    }
}

pub fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let io = |source| DatasetError::Io { path: dir.to_path_buf(), source };
    let mut entries = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        entries.push(entry.map_err(io)?.path());
    }
    entries.sort();
    Ok(entries)
}

/// Image files under `path`: the file itself, or every image below a
/// directory in sorted order. Hidden entries are ignored.
pub fn list_images(path: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    for entry in read_dir_sorted(path)? {
        if entry.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.')) {
            continue;
        }
        if entry.is_dir() {
            out.extend(list_images(&entry)?);
        } else if is_image_file(&entry) {
            out.push(entry);
        }
    }
    Ok(out)
}

/// Scans `root/<ClassName>/<images>` into a manifest.
///
/// Every candidate file is decoded once; files that fail to decode are
/// logged, recorded in `skipped`, and left out of the manifest.
pub fn scan_dataset(root: &Path, class_set: Option<ClassSet>) -> Result<DatasetManifest, DatasetError> {
    if !root.is_dir() {
        return Err(DatasetError::Io {
            path: root.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        });
    }
    let class_dirs: Vec<PathBuf> = read_dir_sorted(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .filter(|p| !p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.')))
        .collect();

    let dir_name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let class_set = match class_set {
        Some(set) => {
            for d in &class_dirs {
                let name = dir_name(d);
                if set.index_of(&name).is_none() {
                    return Err(DatasetError::UnknownClassDir(name));
                }
            }
            set
        }
        None => ClassSet::new(class_dirs.iter().map(|d| dir_name(d)))?,
    };

    let mut by_class: BTreeMap<usize, Vec<PathBuf>> = BTreeMap::new();
    for d in &class_dirs {
        let label = class_set.index_of(&dir_name(d)).expect("checked above");
        let files = read_dir_sorted(d)?.into_iter().filter(|p| p.is_file() && is_image_file(p));
        by_class.entry(label).or_default().extend(files);
    }

    let mut frames = Vec::new();
    let mut skipped = Vec::new();
    for label in 0..class_set.len() {
        let mut kept = 0;
        for path in by_class.remove(&label).unwrap_or_default() {
            match image::open(&path) {
                Ok(_) => {
                    frames.push(LabeledFrame { path, label, split: Split::Unassigned });
                    kept += 1;
                }
                Err(e) => {
                    log::warn!("skipping unreadable image {}: {e}", path.display());
                    skipped.push(SkippedFile { path, reason: e.to_string() });
                }
            }
        }
        if kept == 0 {
            return Err(DatasetError::EmptyClass(class_set.name(label).to_string()));
        }
    }
    Ok(DatasetManifest { class_set, frames, seed: 0, skipped })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train_fraction: 0.8, seed: 0, stratified: true }
    }
}

/// Number of training frames for a class of `n` frames: round-half-up of
/// `fraction * n`, clamped so both sides keep at least one frame.
pub fn train_count(n: usize, fraction: f64) -> usize {
    let raw = (fraction * n as f64 + 0.5).floor() as usize;
    raw.clamp(1, n - 1)
}

/// Assigns every frame to train or val, per class, with a seeded shuffle.
pub fn stratified_split(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<DatasetManifest, DatasetError> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(DatasetError::InvalidSplit(format!(
            "train_fraction must lie in (0, 1), got {}",
            spec.train_fraction
        )));
    }
    let counts = manifest.class_counts();
    for (c, &n) in counts.iter().enumerate() {
        if n < 2 {
            return Err(DatasetError::TooFewSamples { class: manifest.class_set.name(c).to_string(), count: n });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = manifest.clone();
    out.seed = spec.seed;

    let groups: Vec<Vec<usize>> = if spec.stratified {
        (0..manifest.class_set.len())
            .map(|c| (0..manifest.frames.len()).filter(|&i| manifest.frames[i].label == c).collect())
            .collect()
    } else {
        vec![(0..manifest.frames.len()).collect()]
    };
    for mut idx in groups {
        idx.shuffle(&mut rng);
        let n_train = train_count(idx.len(), spec.train_fraction);
        for (rank, &i) in idx.iter().enumerate() {
            out.frames[i].split = if rank < n_train { Split::Train } else { Split::Val };
        }
    }
    Ok(out)
}

/// Decodes a frame as 8-bit RGB. Grayscale inputs are promoted to 3 channels.
pub fn load_image(path: &Path) -> Result<ImageTensor, DatasetError> {
    let img = image::open(path)
        .map_err(|e| DatasetError::UnreadableImage { path: path.to_path_buf(), reason: e.to_string() })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[c * h * w + y * w + x] = f64::from(px[c]);
        }
    }
    Ok(ImageTensor::from_raw(h, w, data, RangeState::Raw))
}
