//! Central-difference verification of the ensemble's analytic gradients.
//!
//! Entries are drawn by picking a parameter array uniformly, then an index
//! within it, so small arrays (norm scales, biases) are covered as well as
//! large convolution kernels.
//!
//! ReLU and max-pool make the loss piecewise smooth. An entry whose interval
//! `[θ - h, θ + h]` contains a kink gives a meaningless difference quotient,
//! so each entry is first tested for smoothness by comparing the central
//! differences at `h` and `h / 2`. That test never looks at the analytic
//! gradient; entries that fail it are skipped and replaced.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::{zero_grads, EnsembleModel, Mode, Tensor, Visit};
use crate::training::{cross_entropy_logits, fused_loss, loss_and_grads, TrainError};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub h: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Largest relative disagreement between the `h` and `h / 2` quotients
    /// for an entry to count as smooth.
    pub smoothness: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { h: 1e-4, floor: 1e-6, smoothness: 1e-4, samples: 20, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub checked: Vec<GradSample>,
    /// Entries whose neighbourhood contains a kink.
    pub skipped: Vec<(String, usize)>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.checked.iter().map(|s| s.rel_error).fold(0.0, f64::max)
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Training objective on one batch: the fused loss when `joint`, otherwise
/// the sum of both backbones' own cross-entropies.
fn objective(model: &mut EnsembleModel, x: &Tensor, labels: &[usize], joint: bool) -> Result<f64, TrainError> {
    let out = model.forward(x, Mode::Train)?;
    if joint {
        fused_loss(&out, model.fusion, labels)
    } else {
        Ok(cross_entropy_logits(&out.logits_a, labels)? + cross_entropy_logits(&out.logits_b, labels)?)
    }
}

fn set_entry(model: &mut EnsembleModel, target: &str, index: usize, value: f64) {
    model.visit_params_mut("", &mut |name, p| {
        if name == target {
            p.value[index] = value;
        }
    });
}

/// Checks `cfg.samples` smooth entries. Gives up after `50 * samples`
/// draws; the report then holds fewer checked entries.
pub fn check_gradients(
    model: &mut EnsembleModel,
    x: &Tensor,
    labels: &[usize],
    joint: bool,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, TrainError> {
    zero_grads(model);
    let out = model.forward(x, Mode::Train)?;
    let (_, da, db) = loss_and_grads(&out, model.fusion, labels, joint)?;
    model.backward(&da, &db);

    let mut arrays: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    model.visit_params_mut("", &mut |name, p| arrays.push((name.to_string(), p.value.clone(), p.grad().to_vec())));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let quotient = |model: &mut EnsembleModel, name: &str, i: usize, v: f64, h: f64| -> Result<f64, TrainError> {
        set_entry(model, name, i, v + h);
        let up = objective(model, x, labels, joint)?;
        set_entry(model, name, i, v - h);
        let down = objective(model, x, labels, joint)?;
        set_entry(model, name, i, v);
        Ok((up - down) / (2.0 * h))
    };
    for _ in 0..50 * cfg.samples {
        if report.checked.len() == cfg.samples {
            break;
        }
        let (name, values, grads) = &arrays[rng.random_range(0..arrays.len())];
        let i = rng.random_range(0..values.len());
        let numeric = quotient(model, name, i, values[i], cfg.h)?;
        let half = quotient(model, name, i, values[i], cfg.h / 2.0)?;
        if relative_error(numeric, half, cfg.floor) > cfg.smoothness {
            report.skipped.push((name.clone(), i));
            continue;
        }
        report.checked.push(GradSample {
            name: name.clone(),
            index: i,
            analytic: grads[i],
            numeric,
            rel_error: relative_error(grads[i], numeric, cfg.floor),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ClassSet;
    use crate::nn::ModelConfig;

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(2.0, 1.0, 1e-6), 0.5);
        assert_eq!(relative_error(0.0, 1e-9, 1e-6), 1e-3);
    }

    #[test]
    fn smooth_entries_agree_and_scaled_ones_would_not() {
        let classes = ClassSet::new(["a", "b"]).unwrap();
        let mut model = EnsembleModel::new(&ModelConfig::tiny(2), classes).unwrap();
        let x = Tensor::from_vec(2, 3, 8, 8, (0..384).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect());
        let cfg = GradCheckConfig { samples: 5, ..Default::default() };
        let good = check_gradients(&mut model, &x, &[0, 1], true, &cfg).unwrap();
        assert_eq!(good.checked.len(), 5);
        assert!(good.worst() < 1e-3, "{good:?}");

        // Doubling one analytic entry must show up as a ~1/2 relative error.
        let s = &good.checked[0];
        assert!(relative_error(2.0 * s.analytic, s.numeric, cfg.floor) > 0.4);
    }
}
