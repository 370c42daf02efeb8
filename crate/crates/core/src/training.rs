//! Cross-entropy, Adam, and the epoch loop.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::nn::{argmax, softmax, zero_grads, EnsembleModel, EnsembleOutput, Fusion, Matrix, Mode, NnError, Visit};
use crate::preprocess::{Phase, PipelineConfig, PreparedSplit};

/// Probabilities are clamped to this floor before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub optimizer: Optimizer,
    pub loss: Loss,
    /// Shuffle seed, derived from the run seed.
    #[serde(skip)]
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// One loss on the fused output. When false each backbone is fitted to
    /// its own cross-entropy.
    pub joint_training: bool,
    /// AdamW-style decay applied to the weights instead of the gradient.
    pub decoupled_weight_decay: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 32,
            epochs: 50,
            weight_decay: 1e-4,
            optimizer: Optimizer::Adam,
            loss: Loss::CrossEntropy,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            joint_training: true,
            decoupled_weight_decay: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be finite and non-negative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite gradient in `{param}` at epoch {epoch}, step {step}")]
    NonFiniteGradient { param: String, epoch: usize, step: u64 },
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

fn check_labels(labels: &[usize], k: usize) -> Result<(), TrainError> {
    match labels.iter().find(|&&l| l >= k) {
        Some(&label) => Err(TrainError::LabelOutOfRange { label, classes: k }),
        None => Ok(()),
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Mean of `-log softmax(z)_y` over rows, via log-sum-exp.
pub fn cross_entropy_logits(logits: &Matrix, labels: &[usize]) -> Result<f64, TrainError> {
    assert_eq!(logits.rows, labels.len(), "one label per row");
    check_labels(labels, logits.cols)?;
    let total: f64 = logits.iter_rows().zip(labels).map(|(z, &y)| log_sum_exp(z) - z[y]).sum();
    Ok(total / labels.len() as f64)
}

/// Mean of `-log max(p_y, 1e-12)` over rows.
pub fn cross_entropy_probs(probs: &Matrix, labels: &[usize]) -> Result<f64, TrainError> {
    assert_eq!(probs.rows, labels.len(), "one label per row");
    check_labels(labels, probs.cols)?;
    let total: f64 = probs.iter_rows().zip(labels).map(|(p, &y)| -p[y].max(PROB_FLOOR).ln()).sum();
    Ok(total / labels.len() as f64)
}

/// Cross-entropy of the fused prediction under `fusion`.
pub fn fused_loss(out: &EnsembleOutput, fusion: Fusion, labels: &[usize]) -> Result<f64, TrainError> {
    match fusion {
        Fusion::MeanProb => cross_entropy_probs(&out.probs, labels),
        Fusion::MeanLogit => {
            let avg = out.logits_a.data.iter().zip(&out.logits_b.data).map(|(a, b)| 0.5 * (a + b)).collect();
            cross_entropy_logits(&Matrix::from_vec(out.logits_a.rows, out.logits_a.cols, avg), labels)
        }
    }
}

/// `(softmax(z) - onehot(y)) * scale` per row.
fn softmax_minus_onehot(logits: &Matrix, labels: &[usize], scale: f64) -> Matrix {
    let mut g = Matrix::zeros(logits.rows, logits.cols);
    for (i, &y) in labels.iter().enumerate() {
        let s = softmax(logits.row(i));
        let row = g.row_mut(i);
        for k in 0..s.len() {
            row[k] = (s[k] - if k == y { 1.0 } else { 0.0 }) * scale;
        }
    }
    g
}

/// Reported (fused) loss plus the gradients w.r.t. both backbones' logits.
pub fn loss_and_grads(
    out: &EnsembleOutput,
    fusion: Fusion,
    labels: &[usize],
    joint: bool,
) -> Result<(f64, Matrix, Matrix), TrainError> {
    let loss = fused_loss(out, fusion, labels)?;
    let b = labels.len() as f64;
    if !joint {
        return Ok((
            loss,
            softmax_minus_onehot(&out.logits_a, labels, 1.0 / b),
            softmax_minus_onehot(&out.logits_b, labels, 1.0 / b),
        ));
    }
    match fusion {
        Fusion::MeanLogit => {
            let avg = out.logits_a.data.iter().zip(&out.logits_b.data).map(|(a, b)| 0.5 * (a + b)).collect();
            let avg = Matrix::from_vec(out.logits_a.rows, out.logits_a.cols, avg);
            let g = softmax_minus_onehot(&avg, labels, 0.5 / b);
            Ok((loss, g.clone(), g))
        }
        Fusion::MeanProb => {
            // d(-log p_y)/dz_k for p = (sa + sb)/2 is -(1/p_y) * s_y (δ_yk - s_k) / 2.
            let k = out.probs.cols;
            let mut ga = Matrix::zeros(out.probs.rows, k);
            let mut gb = Matrix::zeros(out.probs.rows, k);
            for (i, &y) in labels.iter().enumerate() {
                let p_y = out.probs.row(i)[y];
                if p_y < PROB_FLOOR {
                    continue;
                }
                let coef = -0.5 / (p_y * b);
                for (logits, g) in [(&out.logits_a, &mut ga), (&out.logits_b, &mut gb)] {
                    let s = softmax(logits.row(i));
                    let row = g.row_mut(i);
                    for c in 0..k {
                        let delta = if c == y { 1.0 } else { 0.0 };
                        row[c] = coef * s[y] * (delta - s[c]);
                    }
                }
            }
            Ok((loss, ga, gb))
        }
    }
}

/// Adam hyperparameters for one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decoupled: bool,
}

impl From<&TrainingConfig> for AdamParams {
    fn from(c: &TrainingConfig) -> Self {
        Self {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
            decoupled: c.decoupled_weight_decay,
        }
    }
}

/// First and second moment estimates of one array.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len] }
    }
}

/// One bias-corrected Adam update at step `t >= 1`.
pub fn adam_update(value: &mut [f64], grad: &[f64], state: &mut AdamState, p: &AdamParams, t: u64) {
    assert!(t >= 1, "Adam steps are 1-based");
    assert_eq!(value.len(), grad.len());
    assert_eq!(value.len(), state.m.len());
    let bc1 = 1.0 - p.beta1.powi(t as i32);
    let bc2 = 1.0 - p.beta2.powi(t as i32);
    for i in 0..value.len() {
        let g = if p.decoupled { grad[i] } else { grad[i] + p.weight_decay * value[i] };
        let m = p.beta1 * state.m[i] + (1.0 - p.beta1) * g;
        let v = p.beta2 * state.v[i] + (1.0 - p.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let step = p.lr * (m / bc1) / ((v / bc2).sqrt() + p.eps);
        if p.decoupled {
            value[i] -= p.lr * p.weight_decay * value[i];
        }
        value[i] -= step;
    }
}

/// Adam over every parameter of a model, in visit order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub params: AdamParams,
    pub t: u64,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(params: AdamParams) -> Self {
        Self { params, t: 0, states: Vec::new() }
    }

    /// Applies one update from the gradients accumulated in `model`. Nothing
    /// is modified if any gradient is non-finite.
    pub fn step<V: Visit + ?Sized>(&mut self, model: &mut V, epoch: usize) -> Result<(), TrainError> {
        let mut bad: Option<String> = None;
        model.visit_params_mut("", &mut |name, p| {
            if bad.is_none() && p.grad().iter().any(|g| !g.is_finite()) {
                bad = Some(name.to_string());
            }
        });
        if let Some(param) = bad {
            return Err(TrainError::NonFiniteGradient { param, epoch, step: self.t + 1 });
        }
        self.t += 1;
        let (t, hp, states) = (self.t, self.params, &mut self.states);
        let mut idx = 0;
        model.visit_params_mut("", &mut |_, p| {
            if states.len() <= idx {
                states.push(AdamState::new(p.len()));
            }
            let (value, grad) = p.split_mut();
            adam_update(value, grad, &mut states[idx], &hp, t);
            idx += 1;
        });
        Ok(())
    }
}

/// Shuffled sample order for `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn count_correct(probs: &Matrix, labels: &[usize]) -> usize {
    probs.iter_rows().zip(labels).filter(|(p, &y)| argmax(p) == y).count()
}

/// One pass over `data` with an optimizer step per batch. Returns the
/// sample-weighted mean loss and the accuracy of the fused predictions.
pub fn train_epoch(
    model: &mut EnsembleModel,
    data: &PreparedSplit,
    pipeline: &PipelineConfig,
    cfg: &TrainingConfig,
    optimizer: &mut Adam,
    epoch: usize,
) -> Result<(f64, f64), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    let order = epoch_order(data.len(), cfg.seed, epoch);
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for chunk in order.chunks(cfg.batch_size) {
        let (x, labels) = data.batch(chunk, Phase::Train, pipeline, epoch as u64);
        let out = model.forward(&x, Mode::Train)?;
        let (loss, ga, gb) = loss_and_grads(&out, model.fusion, &labels, cfg.joint_training)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        zero_grads(model);
        model.backward(&ga, &gb);
        optimizer.step(model, epoch)?;
        loss_sum += loss * labels.len() as f64;
        correct += count_correct(&out.probs, &labels);
    }
    Ok((loss_sum / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Deterministic evaluation-mode pass; parameters and buffers are untouched.
pub fn validate_epoch(
    model: &mut EnsembleModel,
    data: &PreparedSplit,
    pipeline: &PipelineConfig,
    batch_size: usize,
) -> Result<(f64, f64), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk, Phase::Val, pipeline, 0);
        let out = model.forward(&x, Mode::Eval)?;
        loss_sum += fused_loss(&out, model.fusion, &labels)? * labels.len() as f64;
        correct += count_correct(&out.probs, &labels);
    }
    Ok((loss_sum / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Best-epoch bookkeeping: a new best needs a strictly higher accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestTracker {
    pub best_acc: f64,
    pub best_epoch: Option<usize>,
}

impl Default for BestTracker {
    fn default() -> Self {
        Self { best_acc: f64::NEG_INFINITY, best_epoch: None }
    }
}

impl BestTracker {
    /// Returns true when `acc` becomes the new best.
    pub fn observe(&mut self, epoch: usize, acc: f64) -> bool {
        if acc > self.best_acc {
            self.best_acc = acc;
            self.best_epoch = Some(epoch);
            true
        } else {
            false
        }
    }
}

#[derive(Debug)]
pub struct FitOutcome {
    pub history: Vec<EpochMetrics>,
    pub best: Checkpoint,
}

/// A failed run keeps the epochs that completed and the best snapshot so far.
#[derive(Debug, Error)]
#[error("training aborted after {} completed epochs: {error}", history.len())]
pub struct FitAbort {
    pub error: TrainError,
    pub history: Vec<EpochMetrics>,
    pub best: Option<Checkpoint>,
}

/// Runs `cfg.epochs` epochs (numbered from 1), snapshotting the model
/// whenever validation accuracy improves.
pub fn fit(
    model: &mut EnsembleModel,
    train: &PreparedSplit,
    val: &PreparedSplit,
    pipeline: &PipelineConfig,
    cfg: &TrainingConfig,
    meta: CheckpointMeta,
) -> Result<FitOutcome, FitAbort> {
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<Checkpoint> = None;
    let abort = |error, history, best| FitAbort { error, history, best };
    if let Err(e) = cfg.validate() {
        return Err(abort(e, history, best));
    }
    let mut optimizer = Adam::new(AdamParams::from(cfg));
    let mut tracker = BestTracker::default();
    for epoch in 1..=cfg.epochs {
        let (train_loss, train_acc) = match train_epoch(model, train, pipeline, cfg, &mut optimizer, epoch) {
            Ok(r) => r,
            Err(e) => return Err(abort(e, history, best)),
        };
        let (val_loss, val_acc) = match validate_epoch(model, val, pipeline, cfg.batch_size) {
            Ok(r) => r,
            Err(e) => return Err(abort(e, history, best)),
        };
        let m = EpochMetrics { epoch, train_loss, val_loss, train_acc, val_acc };
        log::info!(
            "epoch {epoch}/{}: train_loss {train_loss:.4} train_acc {train_acc:.4} val_loss {val_loss:.4} val_acc {val_acc:.4}",
            cfg.epochs
        );
        history.push(m);
        if tracker.observe(epoch, val_acc) {
            best = Some(Checkpoint::capture(model, meta.clone(), epoch, val_acc));
        }
    }
    let best = best.expect("at least one epoch ran");
    Ok(FitOutcome { history, best })
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,train_acc,val_acc";

/// CSV with full round-trip precision.
pub fn history_to_csv(history: &[EpochMetrics]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    if history.is_empty() {
        w.write_record(HISTORY_HEADER.split(',')).expect("in-memory write");
    }
    for m in history {
        w.serialize(m).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

pub fn parse_history_csv(text: &str) -> Result<Vec<EpochMetrics>, String> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| e.to_string())?;
    if header.iter().ne(HISTORY_HEADER.split(',')) {
        return Err(format!("expected header `{HISTORY_HEADER}`"));
    }
    r.deserialize().map(|row| row.map_err(|e| e.to_string())).collect()
}

pub fn write_history(history: &[EpochMetrics], csv_path: &Path, json_path: &Path) -> std::io::Result<()> {
    std::fs::write(csv_path, history_to_csv(history))?;
    let mut f = std::fs::File::create(json_path)?;
    serde_json::to_writer_pretty(&mut f, history)?;
    f.write_all(b"\n")
}
