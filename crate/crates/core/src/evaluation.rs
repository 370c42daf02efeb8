//! Confusion matrix, per-class report, and one-vs-rest ROC curves.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::dataset::ClassSet;
use crate::nn::{argmax, Matrix};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("class needs at least one positive and one negative sample")]
    DegenerateClass,
}

/// Rows are true classes, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub class_set: ClassSet,
}

impl ConfusionMatrix {
    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    /// Header row and first column hold class names.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![String::new()];
        header.extend(self.class_set.names().iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for (name, row) in self.class_set.names().iter().zip(&self.counts) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }
}

pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], class_set: &ClassSet) -> Result<ConfusionMatrix, EvalError> {
    if y_true.len() != y_pred.len() {
        return Err(EvalError::LengthMismatch(y_true.len(), y_pred.len()));
    }
    if y_true.is_empty() {
        return Err(EvalError::Empty);
    }
    let k = class_set.len();
    let mut counts = vec![vec![0u64; k]; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if let Some(&label) = [t, p].iter().find(|&&l| l >= k) {
            return Err(EvalError::LabelOutOfRange { label, classes: k });
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts, class_set: class_set.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// No predictions of this class; precision reported as 0.
    pub precision_undefined: bool,
    /// No true samples of this class; recall reported as 0.
    pub recall_undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    /// Classes with support > 0, which the macro averages run over.
    pub macro_classes: usize,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

fn f1_score(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

pub fn classification_report(cm: &ConfusionMatrix) -> Result<ClassificationReport, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::Empty);
    }
    let per_class: Vec<ClassMetrics> = (0..cm.k())
        .map(|c| {
            let tp = cm.counts[c][c];
            let (precision, precision_undefined) = ratio(tp, cm.col_sum(c));
            let (recall, recall_undefined) = ratio(tp, cm.row_sum(c));
            ClassMetrics {
                precision,
                recall,
                f1: f1_score(precision, recall),
                support: cm.row_sum(c),
                precision_undefined,
                recall_undefined,
            }
        })
        .collect();
    let present: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.support > 0).collect();
    let mean = |f: fn(&ClassMetrics) -> f64| present.iter().map(|m| f(m)).sum::<f64>() / present.len() as f64;
    // Pooled over classes: TP = trace and every error is one FP and one FN.
    let tp = cm.trace();
    let errors = total - tp;
    Ok(ClassificationReport {
        accuracy: tp as f64 / total as f64,
        micro_f1: (2 * tp) as f64 / (2 * tp + 2 * errors) as f64,
        macro_f1: mean(|m| m.f1),
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_classes: present.len(),
        per_class,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub class_index: usize,
    /// `(fpr, tpr)` from (0, 0) to (1, 1).
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

fn count_classes(is_positive: &[bool]) -> Result<(usize, usize), EvalError> {
    let pos = is_positive.iter().filter(|&&p| p).count();
    let neg = is_positive.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::DegenerateClass);
    }
    Ok((pos, neg))
}

/// Threshold sweep over distinct scores, highest first; tied scores form a
/// single step. AUC by the trapezoidal rule.
pub fn roc_curve(scores: &[f64], is_positive: &[bool], class_index: usize) -> Result<RocCurve, EvalError> {
    if scores.len() != is_positive.len() {
        return Err(EvalError::LengthMismatch(scores.len(), is_positive.len()));
    }
    let (pos, neg) = count_classes(is_positive)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if is_positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    let auc = points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum();
    Ok(RocCurve { class_index, points, auc })
}

/// Mann-Whitney estimate: the fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half.
pub fn auc_pairwise_oracle(scores: &[f64], is_positive: &[bool]) -> Result<f64, EvalError> {
    let (pos, neg) = count_classes(is_positive)?;
    let positives = scores.iter().zip(is_positive).filter(|(_, &p)| p).map(|(s, _)| *s);
    let negatives: Vec<f64> = scores.iter().zip(is_positive).filter(|(_, &p)| !p).map(|(s, _)| *s).collect();
    let mut twice = 0u64;
    for sp in positives {
        for &sn in &negatives {
            twice += match sp.partial_cmp(&sn) {
                Some(std::cmp::Ordering::Greater) => 2,
                Some(std::cmp::Ordering::Equal) => 1,
                _ => 0,
            };
        }
    }
    Ok(twice as f64 / (2 * pos * neg) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: ClassificationReport,
    pub confusion: ConfusionMatrix,
    pub roc: Vec<RocCurve>,
    /// Classes without both positives and negatives; no curve is drawn.
    pub roc_omitted: Vec<usize>,
    pub predictions: Vec<usize>,
}

/// Full metric suite from fused probabilities. Predictions are the argmax
/// with ties going to the lowest index; ROC scores are the class columns.
pub fn evaluate_probs(probs: &Matrix, labels: &[usize], class_set: &ClassSet) -> Result<Evaluation, EvalError> {
    if probs.rows != labels.len() {
        return Err(EvalError::LengthMismatch(probs.rows, labels.len()));
    }
    let predictions: Vec<usize> = probs.iter_rows().map(argmax).collect();
    let confusion = confusion_matrix(labels, &predictions, class_set)?;
    let report = classification_report(&confusion)?;
    let mut roc = Vec::new();
    let mut roc_omitted = Vec::new();
    for c in 0..class_set.len() {
        let scores: Vec<f64> = probs.iter_rows().map(|r| r[c]).collect();
        let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        match roc_curve(&scores, &positive, c) {
            Ok(curve) => roc.push(curve),
            Err(EvalError::DegenerateClass) => roc_omitted.push(c),
            Err(e) => return Err(e),
        }
    }
    Ok(Evaluation { report, confusion, roc, roc_omitted, predictions })
}

impl Evaluation {
    /// `classes`, `accuracy`, `macro_*`, `micro_f1` and `auc`, plus notes on
    /// zero-division and omitted curves.
    pub fn report_json(&self) -> Value {
        let names = self.confusion.class_set.names();
        let mut classes = Map::new();
        let mut zero_division = Vec::new();
        for (name, m) in names.iter().zip(&self.report.per_class) {
            classes.insert(
                name.clone(),
                json!({"precision": m.precision, "recall": m.recall, "f1": m.f1, "support": m.support}),
            );
            if m.precision_undefined {
                zero_division.push(json!({"class": name, "metric": "precision"}));
            }
            if m.recall_undefined {
                zero_division.push(json!({"class": name, "metric": "recall"}));
            }
        }
        let auc: Map<String, Value> = self.roc.iter().map(|c| (names[c.class_index].clone(), json!(c.auc))).collect();
        json!({
            "classes": classes,
            "accuracy": self.report.accuracy,
            "macro_f1": self.report.macro_f1,
            "micro_f1": self.report.micro_f1,
            "macro_precision": self.report.macro_precision,
            "macro_recall": self.report.macro_recall,
            "macro_over_classes": self.report.macro_classes,
            "auc": auc,
            "auc_omitted": self.roc_omitted.iter().map(|&c| names[c].clone()).collect::<Vec<_>>(),
            "zero_division": zero_division,
        })
    }

    pub fn roc_json(&self) -> Value {
        let names = self.confusion.class_set.names();
        json!({
            "curves": self.roc.iter().map(|c| json!({
                "class": names[c.class_index],
                "class_index": c.class_index,
                "auc": c.auc,
                "fpr": c.points.iter().map(|p| p.0).collect::<Vec<_>>(),
                "tpr": c.points.iter().map(|p| p.1).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
            "omitted": self.roc_omitted.iter().map(|&c| names[c].clone()).collect::<Vec<_>>(),
        })
    }

    pub fn write_report(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(&self.report_json()).expect("json values serialize");
        std::fs::write(path, text + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, Just, Strategy};

    fn classes(k: usize) -> ClassSet {
        ClassSet::new((0..k).map(|i| format!("c{i}"))).unwrap()
    }

    #[test]
    fn confusion_examples() {
        let cm = confusion_matrix(&[0, 0, 1], &[0, 1, 1], &classes(2)).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 1], vec![0, 1]]);
        let diag = confusion_matrix(&[0, 1, 1, 2], &[0, 1, 1, 2], &classes(3)).unwrap();
        assert_eq!(diag.counts, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
        assert_eq!(
            confusion_matrix(&[0, 3], &[0, 0], &classes(3)),
            Err(EvalError::LabelOutOfRange { label: 3, classes: 3 })
        );
    }

    #[test]
    fn report_of_two_by_two() {
        let cm = confusion_matrix(&[0, 0, 1], &[0, 1, 1], &classes(2)).unwrap();
        let r = classification_report(&cm).unwrap();
        assert_eq!((r.per_class[0].precision, r.per_class[0].recall), (1.0, 0.5));
        assert_eq!((r.per_class[1].precision, r.per_class[1].recall), (0.5, 1.0));
        assert_abs_diff_eq!(r.per_class[0].f1, 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.per_class[1].f1, 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.accuracy, 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(r.micro_f1, r.accuracy);
    }

    #[test]
    fn zero_division_is_flagged() {
        let cm = confusion_matrix(&[0, 0, 1], &[0, 0, 0], &classes(3)).unwrap();
        let r = classification_report(&cm).unwrap();
        assert!(r.per_class[1].precision_undefined && !r.per_class[1].recall_undefined);
        assert!(r.per_class[2].precision_undefined && r.per_class[2].recall_undefined);
        assert_eq!(r.macro_classes, 2);
        assert_abs_diff_eq!(r.macro_recall, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn roc_examples() {
        let s = [0.9, 0.8, 0.3, 0.1];
        assert_eq!(roc_curve(&s, &[true, true, false, false], 0).unwrap().auc, 1.0);
        assert_eq!(roc_curve(&s, &[true, false, true, false], 0).unwrap().auc, 0.75);
        assert_eq!(auc_pairwise_oracle(&s, &[true, false, true, false]).unwrap(), 0.75);
        assert_eq!(auc_pairwise_oracle(&s, &[false, false, true, true]).unwrap(), 0.0);
        let flat = roc_curve(&[0.4; 4], &[true, false, true, false], 0).unwrap();
        assert_eq!(flat.points, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(flat.auc, 0.5);
        assert_eq!(roc_curve(&s, &[true; 4], 0), Err(EvalError::DegenerateClass));
    }

    #[test]
    fn oracle_model_scores_perfectly() {
        let labels = [0, 1, 2, 1, 0];
        let mut probs = Matrix::zeros(5, 3);
        for (i, &l) in labels.iter().enumerate() {
            probs.row_mut(i)[l] = 1.0;
        }
        let e = evaluate_probs(&probs, &labels, &classes(3)).unwrap();
        assert_eq!(e.report.accuracy, 1.0);
        assert!(e.roc.iter().all(|c| c.auc == 1.0));
        let uniform = Matrix::from_vec(4, 2, vec![0.5; 8]);
        let e = evaluate_probs(&uniform, &[0, 1, 0, 1], &classes(2)).unwrap();
        assert_eq!(e.predictions, vec![0; 4]);
        assert_eq!(e.report.accuracy, 0.5);
        assert!(e.roc.iter().all(|c| c.auc == 0.5));
    }

    #[test]
    fn degenerate_class_is_omitted_not_fabricated() {
        let probs = Matrix::from_rows(&[vec![0.7, 0.2, 0.1], vec![0.1, 0.8, 0.1]]);
        let e = evaluate_probs(&probs, &[0, 1], &classes(3)).unwrap();
        assert_eq!(e.roc.len(), 2);
        assert_eq!(e.roc_omitted, vec![2]);
        let j = e.report_json();
        assert!(j["auc"].get("c2").is_none());
        assert_eq!(j["auc_omitted"][0], "c2");
    }

    #[test]
    fn confusion_csv_layout() {
        let cm = confusion_matrix(&[0, 0, 1], &[0, 1, 1], &classes(2)).unwrap();
        assert_eq!(cm.to_csv(), ",c0,c1\nc0,1,1\nc1,0,1\n");
    }

    fn instance() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
        (2usize..=10).prop_flat_map(|k| (Just(k), prop::collection::vec((0..k, 0..k), 1..200)))
    }

    proptest! {
        #[test]
        fn micro_f1_is_accuracy((k, pairs) in instance()) {
            let (t, p): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let cm = confusion_matrix(&t, &p, &classes(k)).unwrap();
            let r = classification_report(&cm).unwrap();
            prop_assert_eq!(r.micro_f1, r.accuracy);
            prop_assert_eq!(cm.total(), t.len() as u64);
        }

        #[test]
        fn metrics_ignore_sample_order((k, pairs) in instance(), rot in 0usize..200) {
            let (t, p): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
            let mut rotated = pairs.clone();
            let n = rotated.len();
            rotated.rotate_left(rot % n);
            rotated.reverse();
            let (t2, p2): (Vec<_>, Vec<_>) = rotated.into_iter().unzip();
            let a = classification_report(&confusion_matrix(&t, &p, &classes(k)).unwrap()).unwrap();
            let b = classification_report(&confusion_matrix(&t2, &p2, &classes(k)).unwrap()).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn relabeling_permutes_per_class_metrics((k, pairs) in instance(), shift in 1usize..10) {
            let perm = |c: usize| (c + shift) % k;
            let (t, p): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
            let (t2, p2): (Vec<_>, Vec<_>) = pairs.iter().map(|&(a, b)| (perm(a), perm(b))).unzip();
            let a = classification_report(&confusion_matrix(&t, &p, &classes(k)).unwrap()).unwrap();
            let b = classification_report(&confusion_matrix(&t2, &p2, &classes(k)).unwrap()).unwrap();
            for c in 0..k {
                prop_assert_eq!(a.per_class[c], b.per_class[perm(c)]);
            }
            prop_assert_eq!(a.accuracy, b.accuracy);
        }

        #[test]
        fn roc_is_monotone_and_anchored(
            data in prop::collection::vec((0u8..6, proptest::bool::ANY), 2..120)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 5.0).collect();
            let pos: Vec<bool> = data.iter().map(|d| d.1).collect();
            if let Ok(c) = roc_curve(&scores, &pos, 0) {
                prop_assert_eq!(c.points[0], (0.0, 0.0));
                prop_assert_eq!(*c.points.last().unwrap(), (1.0, 1.0));
                prop_assert!(c.points.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
                let oracle = auc_pairwise_oracle(&scores, &pos).unwrap();
                prop_assert!((c.auc - oracle).abs() < 1e-9);
            }
        }
    }
}
