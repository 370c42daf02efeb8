//! Batched, evaluation-mode forward passes over a prepared split.

use std::path::Path;

use serde_json::json;

use crate::dataset::ClassSet;
use crate::nn::{EnsembleModel, Matrix, Mode, NnError};
use crate::preprocess::{Phase, PipelineConfig, PreparedSplit};

#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    /// Fused class probabilities, one row per frame.
    pub probs: Matrix,
    /// Concatenated penultimate features of both backbones.
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Predictions {
    pub fn predicted(&self) -> Vec<usize> {
        self.probs.iter_rows().map(crate::nn::argmax).collect()
    }
}

/// Runs every frame through the deterministic (validation) pipeline. Rows do
/// not depend on how frames are batched.
pub fn predict_split(
    model: &mut EnsembleModel,
    data: &PreparedSplit,
    pipeline: &PipelineConfig,
    batch_size: usize,
) -> Result<Predictions, NnError> {
    let k = model.num_classes();
    let mut probs = Matrix::zeros(0, k);
    let mut features = Matrix::zeros(0, model.feature_dim());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, _) = data.batch(chunk, Phase::Val, pipeline, 0);
        let out = model.forward(&x, Mode::Eval)?;
        probs = probs.vconcat(&out.probs);
        features = features.vconcat(&out.features);
    }
    Ok(Predictions { probs, features, labels: data.labels.clone() })
}

/// Feature matrix (N × (dimA + dimB)) and labels of a split.
pub fn extract_features(
    model: &mut EnsembleModel,
    data: &PreparedSplit,
    pipeline: &PipelineConfig,
    batch_size: usize,
) -> Result<(Matrix, Vec<usize>), NnError> {
    let p = predict_split(model, data, pipeline, batch_size)?;
    Ok((p.features, p.labels))
}

/// Writes `predictions.csv` (`path,predicted_class,confidence`) and
/// `probabilities.json` (class order plus one probability row per path).
pub fn write_predictions(paths: &[std::path::PathBuf], probs: &Matrix, class_set: &ClassSet, dir: &Path) -> std::io::Result<()> {
    assert_eq!(paths.len(), probs.rows, "one probability row per path");
    let mut w = csv::Writer::from_path(dir.join("predictions.csv"))?;
    w.write_record(["path", "predicted_class", "confidence"])?;
    for (path, row) in paths.iter().zip(probs.iter_rows()) {
        let best = crate::nn::argmax(row);
        w.write_record([path.display().to_string(), class_set.name(best).to_string(), row[best].to_string()])?;
    }
    w.flush()?;
    let rows: Vec<_> = paths
        .iter()
        .zip(probs.iter_rows())
        .map(|(p, row)| json!({"path": p.display().to_string(), "probabilities": row}))
        .collect();
    let doc = json!({"classes": class_set.names(), "predictions": rows});
    std::fs::write(dir.join("probabilities.json"), serde_json::to_string_pretty(&doc)? + "\n")
}
