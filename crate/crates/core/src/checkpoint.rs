//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic       8 bytes  "CAPSCKPT"
//! version     u32
//! header_len  u64
//! header      JSON: format_version, model config, classes, metadata,
//!             best_val_acc, epoch, and the (name, kind, len) table
//! arrays      f64 values of every table entry, in table order
//! digest      32-byte SHA-256 of everything above
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{ClassSet, SplitSpec};
use crate::nn::{EnsembleModel, ModelConfig, NnError, TensorKind, Visit};
use crate::preprocess::PipelineConfig;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CAPSCKPT";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleConfig(String),
    #[error("checkpoint io on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] NnError),
}

/// Everything besides the weights needed to reuse a model on new frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub pipeline: PipelineConfig,
    pub split: Option<SplitSpec>,
    /// Free-form echo of the run configuration that produced the model.
    pub config_echo: serde_json::Value,
}

impl Default for CheckpointMeta {
    fn default() -> Self {
        Self { pipeline: PipelineConfig::default(), split: None, config_echo: serde_json::Value::Null }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub kind: TensorKind,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub class_set: ClassSet,
    pub meta: CheckpointMeta,
    pub best_val_acc: f64,
    pub epoch: usize,
    pub arrays: Vec<NamedArray>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    classes: ClassSet,
    meta: CheckpointMeta,
    best_val_acc: f64,
    epoch: usize,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    kind: String,
    len: usize,
}

fn kind_name(kind: TensorKind) -> &'static str {
    match kind {
        TensorKind::Param => "param",
        TensorKind::Buffer => "buffer",
    }
}

impl Checkpoint {
    /// Snapshot of every parameter and buffer of `model`.
    pub fn capture(model: &EnsembleModel, meta: CheckpointMeta, epoch: usize, best_val_acc: f64) -> Self {
        let mut arrays = Vec::new();
        model.visit("", &mut |name, kind, data| {
            arrays.push(NamedArray { name: name.to_string(), kind, data: data.to_vec() })
        });
        Self { model: model.config(), class_set: model.class_set.clone(), meta, best_val_acc, epoch, arrays }
    }

    /// Rebuilds the model and copies every stored array into it.
    pub fn to_model(&self) -> Result<EnsembleModel, CheckpointError> {
        let mut model = EnsembleModel::new(&self.model, self.class_set.clone())?;
        self.restore_into(&mut model)?;
        Ok(model)
    }

    /// Copies the stored arrays into an existing model of the same layout.
    pub fn restore_into(&self, model: &mut EnsembleModel) -> Result<(), CheckpointError> {
        let mut by_name: std::collections::HashMap<&str, &NamedArray> =
            self.arrays.iter().map(|a| (a.name.as_str(), a)).collect();
        let mut problem: Option<String> = None;
        let mut take = |name: &str, kind: TensorKind, len: usize| -> Option<&NamedArray> {
            match by_name.remove(name) {
                Some(a) if a.kind == kind && a.data.len() == len => Some(a),
                Some(a) => {
                    problem.get_or_insert(format!("array `{name}` has length {} (expected {len})", a.data.len()));
                    None
                }
                None => {
                    problem.get_or_insert(format!("missing array `{name}`"));
                    None
                }
            }
        };
        model.visit_params_mut("", &mut |name, p| {
            if let Some(a) = take(name, TensorKind::Param, p.value.len()) {
                p.value.copy_from_slice(&a.data);
            }
        });
        model.visit_buffers_mut("", &mut |name, b| {
            if let Some(a) = take(name, TensorKind::Buffer, b.len()) {
                b.copy_from_slice(&a.data);
            }
        });
        if let Some(p) = problem {
            return Err(CheckpointError::Corrupt(p));
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(CheckpointError::Corrupt(format!("unexpected array `{extra}`")));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: FORMAT_VERSION,
            model: self.model.clone(),
            classes: self.class_set.clone(),
            meta: self.meta.clone(),
            best_val_acc: self.best_val_acc,
            epoch: self.epoch,
            tensors: self
                .arrays
                .iter()
                .map(|a| TensorEntry { name: a.name.clone(), kind: kind_name(a.kind).into(), len: a.data.len() })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let total: usize = self.arrays.iter().map(|a| a.data.len()).sum();
        let mut out = Vec::with_capacity(8 + 4 + 8 + json.len() + 8 * total + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |m: &str| CheckpointError::Corrupt(m.to_string());
        if bytes.len() < 8 + 4 + 8 + 32 {
            return Err(corrupt("file too short"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Corrupt(format!("unsupported format version {version}")));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or modified file)"));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize.checked_add(header_len).filter(|&e| e <= body.len()).ok_or_else(|| corrupt("header overruns file"))?;
        let header: Header = serde_json::from_slice(&body[20..header_end])
            .map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(corrupt("header format_version disagrees with preamble"));
        }
        let mut cursor = header_end;
        let mut arrays = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let kind = match t.kind.as_str() {
                "param" => TensorKind::Param,
                "buffer" => TensorKind::Buffer,
                other => return Err(CheckpointError::Corrupt(format!("unknown tensor kind `{other}`"))),
            };
            let end = t.len.checked_mul(8).and_then(|n| cursor.checked_add(n)).filter(|&e| e <= body.len());
            let end = end.ok_or_else(|| corrupt("tensor data overruns file"))?;
            let data = body[cursor..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            cursor = end;
            arrays.push(NamedArray { name: t.name, kind, data });
        }
        if cursor != body.len() {
            return Err(corrupt("trailing bytes after tensor data"));
        }
        Ok(Self {
            model: header.model,
            class_set: header.classes,
            meta: header.meta,
            best_val_acc: header.best_val_acc,
            epoch: header.epoch,
            arrays,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    Checkpoint::from_bytes(&bytes)
}

/// Loads a checkpoint and checks it was trained for `expected` classes.
pub fn load_checkpoint_for(path: &Path, expected: &ClassSet) -> Result<Checkpoint, CheckpointError> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.class_set.len() != expected.len() {
        return Err(CheckpointError::IncompatibleConfig(format!(
            "checkpoint has {} classes, dataset has {}",
            ckpt.class_set.len(),
            expected.len()
        )));
    }
    if ckpt.class_set != *expected {
        return Err(CheckpointError::IncompatibleConfig(format!(
            "class names differ: checkpoint {:?}, dataset {:?}",
            ckpt.class_set.names(),
            expected.names()
        )));
    }
    Ok(ckpt)
}
