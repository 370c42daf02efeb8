//! Exact t-SNE.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum TsneError {
    #[error("t-SNE needs at least {min} points, got {n}")]
    TooFewPoints { n: usize, min: usize },
    #[error("perplexity {perplexity} unreachable for point {row} (duplicate points?)")]
    PerplexityUnreachable { row: usize, perplexity: f64 },
    #[error("invalid t-SNE config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    /// Lowered to `(N - 1) / 3` for small inputs.
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch_iter: usize,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch_iter: 250,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self) -> Result<(), TsneError> {
        let bad = |m: &str| Err(TsneError::InvalidConfig(m.into()));
        if !(self.perplexity > 0.0) {
            return bad("perplexity must be positive");
        }
        if self.iterations < 250 {
            return bad("iterations must be at least 250");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.early_exaggeration >= 1.0) {
            return bad("early_exaggeration must be at least 1");
        }
        Ok(())
    }

    /// Perplexity actually used for `n` points.
    pub fn effective_perplexity(&self, n: usize) -> f64 {
        self.perplexity.min((n as f64 - 1.0) / 3.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding2D {
    pub coords: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
    /// KL(P‖Q) after the last iteration.
    pub final_kl: f64,
    /// KL(P‖Q) after the first iteration, on the unexaggerated P.
    pub first_kl: f64,
    pub perplexity: f64,
}

fn squared_distances(x: &Matrix) -> Vec<f64> {
    let n = x.rows;
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

const ENTROPY_TOL: f64 = 1e-5;
const SEARCH_STEPS: usize = 64;

/// Gaussian conditional row `p_{j|i}` whose perplexity matches the target.
fn conditional_row(dist: &[f64], i: usize, perplexity: f64) -> Option<Vec<f64>> {
    let n = dist.len();
    let dmin = (0..n).filter(|&j| j != i).map(|j| dist[j]).fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = (0..n).map(|j| if j == i { 0.0 } else { dist[j] - dmin }).collect();
    let target = perplexity.ln();
    let mean = shifted.iter().sum::<f64>() / (n - 1) as f64;
    let mut beta = if mean > 0.0 { 1.0 / mean } else { 1.0 };
    let (mut lo, mut hi) = (0.0, f64::INFINITY);
    let mut row = vec![0.0; n];
    for _ in 0..SEARCH_STEPS {
        let mut sum = 0.0;
        let mut weighted = 0.0;
        for j in 0..n {
            row[j] = if j == i { 0.0 } else { (-beta * shifted[j]).exp() };
            sum += row[j];
            weighted += row[j] * shifted[j];
        }
        let entropy = sum.ln() + beta * weighted / sum;
        if (entropy - target).abs() < ENTROPY_TOL {
            row.iter_mut().for_each(|p| *p /= sum);
            return Some(row);
        }
        if entropy > target {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
    None
}

/// Symmetrized joint affinities `P = (P_cond + P_condᵀ) / 2N`.
pub fn pairwise_affinities(features: &Matrix, perplexity: f64) -> Result<Matrix, TsneError> {
    let n = features.rows;
    if n < 4 {
        return Err(TsneError::TooFewPoints { n, min: 4 });
    }
    if !(perplexity > 0.0 && perplexity < n as f64) {
        return Err(TsneError::InvalidConfig(format!("perplexity {perplexity} must lie in (0, {n})")));
    }
    let dist = squared_distances(features);
    let mut cond = vec![0.0; n * n];
    for i in 0..n {
        let row = conditional_row(&dist[i * n..(i + 1) * n], i, perplexity)
            .ok_or(TsneError::PerplexityUnreachable { row: i, perplexity })?;
        cond[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    let mut p = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            p.data[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64);
        }
    }
    Ok(p)
}

/// Symmetric, non-negative, zero diagonal, total mass 1.
pub fn check_affinities(p: &Matrix) -> Result<(), String> {
    let n = p.rows;
    let mut total = 0.0;
    for i in 0..n {
        if p.data[i * n + i] != 0.0 {
            return Err(format!("non-zero diagonal at {i}"));
        }
        for j in 0..n {
            let v = p.data[i * n + j];
            if !(v >= 0.0) {
                return Err(format!("negative or NaN entry at ({i}, {j})"));
            }
            if v != p.data[j * n + i] {
                return Err(format!("asymmetric at ({i}, {j})"));
            }
            total += v;
        }
    }
    if (total - 1.0).abs() > 1e-6 {
        return Err(format!("entries sum to {total}"));
    }
    Ok(())
}

/// Unnormalized Student-t kernel `1 / (1 + |y_i - y_j|²)` and its sum.
fn student_kernel(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let (dx, dy) = (y[i][0] - y[j][0], y[i][1] - y[j][1]);
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            num[j * n + i] = v;
            sum += 2.0 * v;
        }
    }
    (num, sum)
}

/// KL(P‖Q) for the embedding `y`.
pub fn kl_divergence(p: &Matrix, y: &[[f64; 2]]) -> f64 {
    let (num, sum) = student_kernel(y);
    p.data
        .iter()
        .zip(&num)
        .filter(|(&pij, _)| pij > 0.0)
        .map(|(&pij, &nij)| pij * (pij / (nij / sum).max(f64::MIN_POSITIVE)).ln())
        .sum()
}

/// Gradient descent on KL(P‖Q) with momentum, per-coordinate gains and
/// early exaggeration. The result is mean-centred.
pub fn tsne_embed(features: &Matrix, labels: &[usize], cfg: &TsneConfig) -> Result<Embedding2D, TsneError> {
    cfg.validate()?;
    let n = features.rows;
    if n < 8 {
        return Err(TsneError::TooFewPoints { n, min: 8 });
    }
    assert_eq!(labels.len(), n, "one label per row");
    let perplexity = cfg.effective_perplexity(n);
    let p = pairwise_affinities(features, perplexity)?;
    if let Err(e) = check_affinities(&p) {
        panic!("affinity invariant violated: {e}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid sigma");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0; 2]; n];
    let mut first_kl = f64::NAN;

    for iter in 0..cfg.iterations {
        let exaggeration = if iter < cfg.exaggeration_iters { cfg.early_exaggeration } else { 1.0 };
        let momentum = if iter < cfg.momentum_switch_iter { cfg.initial_momentum } else { cfg.final_momentum };
        let (num, sum) = student_kernel(&y);
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let nij = num[i * n + j];
                let w = (exaggeration * p.data[i * n + j] - nij / sum) * nij;
                g[0] += w * (y[i][0] - y[j][0]);
                g[1] += w * (y[i][1] - y[j][1]);
            }
            for d in 0..2 {
                let grad = 4.0 * g[d];
                let gain = if (grad > 0.0) != (update[i][d] > 0.0) { gains[i][d] + 0.2 } else { gains[i][d] * 0.8 };
                gains[i][d] = f64::max(gain, 0.01);
                update[i][d] = momentum * update[i][d] - cfg.learning_rate * gains[i][d] * grad;
            }
        }
        for (yi, ui) in y.iter_mut().zip(&update) {
            yi[0] += ui[0];
            yi[1] += ui[1];
        }
        center(&mut y);
        if iter == 0 {
            first_kl = kl_divergence(&p, &y);
        }
    }
    let final_kl = kl_divergence(&p, &y);
    Ok(Embedding2D { coords: y, labels: labels.to_vec(), final_kl, first_kl, perplexity })
}

fn center(y: &mut [[f64; 2]]) {
    let n = y.len() as f64;
    let mx = y.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = y.iter().map(|p| p[1]).sum::<f64>() / n;
    for p in y.iter_mut() {
        p[0] -= mx;
        p[1] -= my;
    }
}

impl Embedding2D {
    /// `x,y,label` rows with full precision.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["x", "y", "label"]).expect("in-memory write");
        for (c, l) in self.coords.iter().zip(&self.labels) {
            w.write_record([format!("{:?}", c[0]), format!("{:?}", c[1]), l.to_string()]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }
}

/// Two-means clustering purity of 2-D points against binary labels, starting
/// from the farthest pair. Used to check that clusters survive embedding.
pub fn two_means_purity(points: &[[f64; 2]], labels: &[usize]) -> f64 {
    let n = points.len();
    let d2 = |a: &[f64; 2], b: &[f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let (mut a, mut b) = (0, 0);
    for i in 0..n {
        for j in i + 1..n {
            if d2(&points[i], &points[j]) > d2(&points[a], &points[b]) {
                (a, b) = (i, j);
            }
        }
    }
    let mut centers = [points[a], points[b]];
    let mut assign = vec![0usize; n];
    for _ in 0..100 {
        let next: Vec<usize> =
            points.iter().map(|p| usize::from(d2(p, &centers[1]) < d2(p, &centers[0]))).collect();
        for (k, c) in centers.iter_mut().enumerate() {
            let members: Vec<&[f64; 2]> = points.iter().zip(&next).filter(|(_, &s)| s == k).map(|(p, _)| p).collect();
            if !members.is_empty() {
                let m = members.len() as f64;
                *c = [members.iter().map(|p| p[0]).sum::<f64>() / m, members.iter().map(|p| p[1]).sum::<f64>() / m];
            }
        }
        if next == assign {
            break;
        }
        assign = next;
    }
    let agree = assign.iter().zip(labels).filter(|(a, l)| *a == *l).count();
    agree.max(n - agree) as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, proptest};

    fn square() -> Matrix {
        Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0]])
    }

    #[test]
    fn square_affinities_respect_symmetry() {
        let p = pairwise_affinities(&square(), 2.0).unwrap();
        check_affinities(&p).unwrap();
        let edge = p.data[1];
        for (i, j) in [(0, 1), (1, 2), (2, 3), (3, 0)] {
            assert!((p.data[i * 4 + j] - edge).abs() < 1e-12);
        }
        assert!((p.data[2] - p.data[7]).abs() < 1e-12);
        assert!(edge > p.data[2]);
    }

    #[test]
    fn conditional_rows_hit_the_target_perplexity() {
        let x = Matrix::from_rows(&(0..12).map(|i| vec![(i as f64).sin() * 3.0, (i * i) as f64 * 0.1]).collect::<Vec<_>>());
        let dist = squared_distances(&x);
        for i in 0..12 {
            let row = conditional_row(&dist[i * 12..(i + 1) * 12], i, 3.0).unwrap();
            let h: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum();
            assert!((2f64.powf(h) - 3.0).abs() < 1e-3);
        }
    }

    #[test]
    fn duplicate_points_make_perplexity_unreachable() {
        let x = Matrix::from_rows(&vec![vec![1.0, 2.0]; 6]);
        assert!(matches!(pairwise_affinities(&x, 2.0), Err(TsneError::PerplexityUnreachable { .. })));
    }

    #[test]
    fn within_cluster_affinity_dominates() {
        let mut rows = Vec::new();
        for c in 0..2 {
            for k in 0..5 {
                rows.push(vec![c as f64 * 10.0 + k as f64 * 0.1, (k % 2) as f64 * 0.1]);
            }
        }
        let p = pairwise_affinities(&Matrix::from_rows(&rows), 3.0).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                for k in 0..10 {
                    let same_ij = i / 5 == j / 5 && i != j;
                    let diff_ik = i / 5 != k / 5;
                    if same_ij && diff_ik {
                        assert!(p.data[i * 10 + j] > p.data[i * 10 + k]);
                    }
                }
            }
        }
    }

    fn clusters(n_per: usize, d: usize, seed: u64) -> (Matrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2 {
            for _ in 0..n_per {
                rows.push((0..d).map(|k| if k % 2 == c { 4.0 } else { 0.0 } + noise.sample(&mut rng)).collect());
                labels.push(c);
            }
        }
        (Matrix::from_rows(&rows), labels)
    }

    #[test]
    fn eight_points_two_clusters() {
        let (x, labels) = clusters(4, 16, 1);
        let e = tsne_embed(&x, &labels, &TsneConfig::default()).unwrap();
        assert!(two_means_purity(&e.coords, &labels) >= 0.9);
        assert!(e.final_kl < e.first_kl);
        assert!(e.coords.iter().flatten().all(|v| v.is_finite()));
        let mx: f64 = e.coords.iter().map(|c| c[0]).sum();
        assert!(mx.abs() < 1e-9);
    }

    #[test]
    fn duplicates_embed_close_together() {
        let (mut x, mut labels) = clusters(10, 8, 2);
        let dup = x.row(3).to_vec();
        x = x.vconcat(&Matrix::from_rows(&[dup]));
        labels.push(0);
        let e = tsne_embed(&x, &labels, &TsneConfig { iterations: 500, ..Default::default() }).unwrap();
        let n = e.coords.len();
        let dist = |a: usize, b: usize| ((e.coords[a][0] - e.coords[b][0]).powi(2) + (e.coords[a][1] - e.coords[b][1]).powi(2)).sqrt();
        let mut all: Vec<f64> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| dist(i, j)).collect();
        all.sort_by(f64::total_cmp);
        assert!(dist(3, n - 1) < all[all.len() / 2]);
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let (x, labels) = clusters(6, 4, 3);
        let cfg = TsneConfig { iterations: 300, seed: 9, ..Default::default() };
        assert_eq!(tsne_embed(&x, &labels, &cfg).unwrap(), tsne_embed(&x, &labels, &cfg).unwrap());
    }

    #[test]
    fn too_few_points() {
        let x = Matrix::zeros(5, 3);
        assert_eq!(tsne_embed(&x, &[0; 5], &TsneConfig::default()), Err(TsneError::TooFewPoints { n: 5, min: 8 }));
    }

    proptest! {
        #[test]
        fn affinities_are_rotation_invariant(
            pts in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 6..20),
            v in prop::collection::vec(-1.0f64..1.0, 3),
        ) {
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-3 {
                return Ok(());
            }
            let x = Matrix::from_rows(&pts);
            let Ok(p) = pairwise_affinities(&x, 2.0) else { return Ok(()) };
            prop_assert!(check_affinities(&p).is_ok());
            // Householder reflection I - 2vvᵀ/|v|² is orthogonal.
            let u: Vec<f64> = v.iter().map(|a| a / norm).collect();
            let rotated: Vec<Vec<f64>> = pts
                .iter()
                .map(|r| {
                    let dot: f64 = r.iter().zip(&u).map(|(a, b)| a * b).sum();
                    r.iter().zip(&u).map(|(a, b)| a - 2.0 * dot * b).collect()
                })
                .collect();
            let q = pairwise_affinities(&Matrix::from_rows(&rotated), 2.0).unwrap();
            for (a, b) in p.data.iter().zip(&q.data) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
