//! Two-backbone ensemble and output fusion.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, BackboneConfig, DenseNetConfig, ResNetConfig};
use super::layers::Mode;
use super::param::{join, Param, TensorKind, Visit};
use super::tensor::{Matrix, Tensor};
use super::NnError;
use crate::dataset::ClassSet;

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    for i in 0..logits.rows {
        out.row_mut(i).copy_from_slice(&softmax(logits.row(i)));
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Average of the two softmax distributions.
    #[default]
    MeanProb,
    /// Softmax of the averaged logits.
    MeanLogit,
}

impl Fusion {
    pub fn fuse(self, logits_a: &Matrix, logits_b: &Matrix) -> Matrix {
        match self {
            Fusion::MeanProb => {
                let pa = softmax_rows(logits_a);
                let pb = softmax_rows(logits_b);
                let data = pa.data.iter().zip(&pb.data).map(|(a, b)| 0.5 * (a + b)).collect();
                Matrix::from_vec(pa.rows, pa.cols, data)
            }
            Fusion::MeanLogit => {
                let data = logits_a.data.iter().zip(&logits_b.data).map(|(a, b)| 0.5 * (a + b)).collect();
                softmax_rows(&Matrix::from_vec(logits_a.rows, logits_a.cols, data))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone_a: BackboneConfig,
    pub backbone_b: BackboneConfig,
    pub fusion: Fusion,
    pub init_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelVariant {
    /// DenseNet-121 + ResNet-50 layouts.
    Full,
    /// Two-stage miniatures for tests and desk-scale runs.
    Tiny,
}

impl ModelConfig {
    pub fn full(num_classes: usize) -> Self {
        Self {
            backbone_a: BackboneConfig::Densenet(DenseNetConfig::densenet121(num_classes)),
            backbone_b: BackboneConfig::Resnet(ResNetConfig::resnet50(num_classes)),
            fusion: Fusion::MeanProb,
            init_seed: 0,
        }
    }

    pub fn tiny(num_classes: usize) -> Self {
        Self {
            backbone_a: BackboneConfig::Densenet(DenseNetConfig::tiny(num_classes)),
            backbone_b: BackboneConfig::Resnet(ResNetConfig::tiny(num_classes)),
            fusion: Fusion::MeanProb,
            init_seed: 0,
        }
    }

    pub fn variant(variant: ModelVariant, num_classes: usize) -> Self {
        match variant {
            ModelVariant::Full => Self::full(num_classes),
            ModelVariant::Tiny => Self::tiny(num_classes),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone_a.feature_dim() + self.backbone_b.feature_dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutput {
    pub probs: Matrix,
    pub logits_a: Matrix,
    pub logits_b: Matrix,
    /// `[features_a | features_b]`.
    pub features: Matrix,
}

#[derive(Debug, Clone)]
pub struct EnsembleModel {
    pub fusion: Fusion,
    pub class_set: ClassSet,
    pub backbone_a: Backbone,
    pub backbone_b: Backbone,
    init_seed: u64,
}

impl EnsembleModel {
    /// Builds both backbones with He-uniform weights from `config.init_seed`.
    pub fn new(config: &ModelConfig, class_set: ClassSet) -> Result<Self, NnError> {
        let (ka, kb) = (config.backbone_a.num_classes(), config.backbone_b.num_classes());
        if ka != kb {
            return Err(NnError::FusionMismatch { a: ka, b: kb });
        }
        if ka != class_set.len() {
            return Err(NnError::InvalidConfig(format!(
                "backbones predict {ka} classes but the class set has {}",
                class_set.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let backbone_a = Backbone::new(config.backbone_a.clone(), &mut rng)?;
        let backbone_b = Backbone::new(config.backbone_b.clone(), &mut rng)?;
        Ok(Self { fusion: config.fusion, class_set, backbone_a, backbone_b, init_seed: config.init_seed })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            backbone_a: self.backbone_a.config(),
            backbone_b: self.backbone_b.config(),
            fusion: self.fusion,
            init_seed: self.init_seed,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_set.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone_a.feature_dim() + self.backbone_b.feature_dim()
    }

    pub fn swap_backbones(&mut self) {
        std::mem::swap(&mut self.backbone_a, &mut self.backbone_b);
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<EnsembleOutput, NnError> {
        let a = self.backbone_a.forward(x, mode)?;
        let b = self.backbone_b.forward(x, mode)?;
        if a.logits.cols != b.logits.cols {
            return Err(NnError::FusionMismatch { a: a.logits.cols, b: b.logits.cols });
        }
        Ok(EnsembleOutput {
            probs: self.fusion.fuse(&a.logits, &b.logits),
            features: a.features.hconcat(&b.features),
            logits_a: a.logits,
            logits_b: b.logits,
        })
    }

    /// Accumulates gradients given loss derivatives w.r.t. each backbone's logits.
    pub fn backward(&mut self, dlogits_a: &Matrix, dlogits_b: &Matrix) {
        self.backbone_a.backward(dlogits_a);
        self.backbone_b.backward(dlogits_b);
    }
}

impl Visit for EnsembleModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &[f64])) {
        self.backbone_a.visit(&join(prefix, "a"), f);
        self.backbone_b.visit(&join(prefix, "b"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.backbone_a.visit_params_mut(&join(prefix, "a"), f);
        self.backbone_b.visit_params_mut(&join(prefix, "b"), f);
    }
    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        self.backbone_a.visit_buffers_mut(&join(prefix, "a"), f);
        self.backbone_b.visit_buffers_mut(&join(prefix, "b"), f);
    }
}
