//! Run configuration file (TOML).
//!
//! ```toml
//! data_root = "data"
//! output_dir = "out"
//! seed = 0
//! # classes = ["Bleeding", "Normal"]   # optional, defaults to the folders found
//!
//! [train]      # lr, batch_size, epochs, weight_decay, optimizer, loss,
//!              # beta1, beta2, eps, joint_training, decoupled_weight_decay
//! [augment]    # hflip_prob, rotation_max_deg, enabled
//! [normalize]  # mean, std
//! [input]      # size
//! [split]      # train_fraction
//! [model]      # variant = "full" | "tiny", fusion, pretrained
//! [tsne]       # perplexity, iterations, learning_rate, ...
//! ```
//!
//! Every key is optional and unknown keys are rejected. All random streams
//! are derived from the single top-level `seed`, which the `SEED`
//! environment variable overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ClassSet, SplitSpec};
use crate::nn::{Fusion, ModelConfig, ModelVariant};
use crate::preprocess::{AugmentationPolicy, NormalizationStats, PipelineConfig};
use crate::training::TrainingConfig;
use crate::tsne::TsneConfig;

pub const SEED_ENV: &str = "SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    /// Square side length frames are resized to.
    pub size: usize,
}

impl Default for InputConfig {
    fn default() -> Self {
        Self { size: 224 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train_fraction: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: ModelVariant,
    pub fusion: Fusion,
    /// Checkpoint whose weights initialize the model.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrained: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { variant: ModelVariant::Full, fusion: Fusion::MeanProb, pretrained: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<String>>,
    pub train: TrainingConfig,
    pub augment: AugmentationPolicy,
    pub normalize: NormalizationStats,
    pub input: InputConfig,
    pub split: SplitConfig,
    pub model: ModelSection,
    pub tsne: TsneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data"),
            output_dir: PathBuf::from("out"),
            seed: 0,
            classes: None,
            train: TrainingConfig::default(),
            augment: AugmentationPolicy::default(),
            normalize: NormalizationStats::default(),
            input: InputConfig::default(),
            split: SplitConfig::default(),
            model: ModelSection::default(),
            tsne: TsneConfig::default(),
        }
    }
}

/// Purpose tags for [`derive_seed`].
pub mod stream {
    pub const SPLIT: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const TSNE: u64 = 5;
}

/// SplitMix64 of `seed ^ tag·φ`, giving unrelated seeds per purpose.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and applies the `SEED` override.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        Ok(cfg)
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<(), ConfigError> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| ConfigError::Invalid(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// JSON copy stored in checkpoints.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes to JSON")
    }

    pub fn from_echo(value: &serde_json::Value) -> Option<Self> {
        serde_json::from_value(value.clone()).ok()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.train.lr == 0.0 {
            return invalid("train.lr must be positive".into());
        }
        self.normalize.validate().map_err(ConfigError::Invalid)?;
        self.tsne.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.augment.hflip_prob) {
            return invalid(format!("augment.hflip_prob must lie in [0, 1], got {}", self.augment.hflip_prob));
        }
        if !(self.augment.rotation_max_deg >= 0.0 && self.augment.rotation_max_deg.is_finite()) {
            return invalid("augment.rotation_max_deg must be finite and non-negative".into());
        }
        if self.input.size == 0 {
            return invalid("input.size must be positive".into());
        }
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return invalid(format!("split.train_fraction must lie in (0, 1), got {}", self.split.train_fraction));
        }
        if let Some(names) = &self.classes {
            ClassSet::new(names.iter().cloned()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    pub fn class_set(&self) -> Option<ClassSet> {
        self.classes.as_ref().map(|n| ClassSet::new(n.iter().cloned()).expect("validated"))
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            input_size: self.input.size,
            stats: self.normalize.clone(),
            augment: AugmentationPolicy { seed: derive_seed(self.seed, stream::AUGMENT), ..self.augment.clone() },
        }
    }

    pub fn training(&self) -> TrainingConfig {
        TrainingConfig { seed: derive_seed(self.seed, stream::SHUFFLE), ..self.train.clone() }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec { train_fraction: self.split.train_fraction, seed: derive_seed(self.seed, stream::SPLIT), stratified: true }
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            fusion: self.model.fusion,
            init_seed: derive_seed(self.seed, stream::INIT),
            ..ModelConfig::variant(self.model.variant, num_classes)
        }
    }

    pub fn tsne(&self) -> TsneConfig {
        TsneConfig { seed: derive_seed(self.seed, stream::TSNE), ..self.tsne.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
        assert!(text.contains("lr = 0.0001"));
        assert!(text.contains("batch_size = 32"));
        assert!(text.contains("epochs = 50"));
        assert!(text.contains("weight_decay = 0.0001"));
    }

    #[test]
    fn echo_roundtrip() {
        let cfg = RunConfig { seed: 9, classes: Some(vec!["a".into(), "b".into()]), ..Default::default() };
        assert_eq!(RunConfig::from_echo(&cfg.echo()), Some(cfg));
        assert_eq!(RunConfig::from_echo(&serde_json::Value::Null), None);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml_str("seed = 4\n[train]\nepochs = 3\n[model]\nvariant = \"tiny\"\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.model.variant, ModelVariant::Tiny);
        assert_eq!(cfg.seed, 4);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_toml_str("[train]\nlearning_rte = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rte"), "{err}");
        let err = RunConfig::from_toml_str("sed = 1\n").unwrap_err();
        assert!(err.to_string().contains("sed"), "{err}");
        assert!(RunConfig::from_toml_str("[augment]\nseed = 1\n").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml_str("[train]\nbatch_size = 0\n").is_err());
        assert!(RunConfig::from_toml_str("[normalize]\nstd = [1.0, 0.0, 1.0]\n").is_err());
        assert!(RunConfig::from_toml_str("[split]\ntrain_fraction = 1.0\n").is_err());
        assert!(RunConfig::from_toml_str("classes = [\"only\"]\n").is_err());
    }

    #[test]
    fn seed_override_and_derivation() {
        let mut cfg = RunConfig::default();
        cfg.apply_seed_override(Some("17")).unwrap();
        assert_eq!(cfg.seed, 17);
        assert!(cfg.apply_seed_override(Some("x")).is_err());
        let seeds = [
            cfg.split_spec().seed,
            cfg.training().seed,
            cfg.pipeline().augment.seed,
            cfg.model_config(10).init_seed,
            cfg.tsne().seed,
        ];
        let mut uniq = seeds.to_vec();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 5);
        assert_ne!(derive_seed(0, 1), derive_seed(1, 1));
    }
}
