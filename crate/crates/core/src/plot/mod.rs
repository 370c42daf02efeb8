//! Figure rendering to PNG. Every figure is written next to a CSV or JSON
//! twin holding the plotted numbers.

pub mod canvas;
pub mod font;

use std::path::Path;

use thiserror::Error;

pub use canvas::{palette, Align, Canvas, Rgb, BLACK, GRAY, LIGHT_GRAY, WHITE};

use crate::dataset::ClassSet;
use crate::evaluation::{ConfusionMatrix, Evaluation};
use crate::training::{history_to_csv, EpochMetrics};
use crate::tsne::Embedding2D;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("cannot plot an empty training history")]
    EmptyHistory,
    #[error("cannot plot an empty embedding")]
    EmptyEmbedding,
    #[error("png encoding: {0}")]
    Png(#[from] png::EncodingError),
    #[error("writing {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

const SCALE: usize = 2;

fn write_text(path: &Path, text: &str) -> Result<(), PlotError> {
    std::fs::write(path, text).map_err(|source| PlotError::Io { path: path.to_path_buf(), source })
}

/// Roughly `target` round tick values covering `[lo, hi]`.
pub fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let span = hi - lo;
    if !(span > 0.0) || !span.is_finite() {
        return vec![lo];
    }
    let raw = span / target.max(1) as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|i| i as f64 * step).collect()
}

fn tick_label(v: f64, step: f64) -> String {
    let decimals = if step >= 1.0 { 0 } else { (-step.log10().floor()) as usize };
    let s = format!("{v:.decimals$}");
    match s.strip_prefix('-') {
        Some(rest) if rest.chars().all(|c| c == '0' || c == '.') => rest.to_string(),
        _ => s,
    }
}

/// A data-space rectangle mapped onto a pixel box.
struct Axes {
    left: i64,
    top: i64,
    width: i64,
    height: i64,
    x: (f64, f64),
    y: (f64, f64),
}

impl Axes {
    fn px(&self, v: f64) -> i64 {
        self.left + ((v - self.x.0) / (self.x.1 - self.x.0) * (self.width - 1) as f64).round() as i64
    }

    fn py(&self, v: f64) -> i64 {
        self.top + self.height - 1 - ((v - self.y.0) / (self.y.1 - self.y.0) * (self.height - 1) as f64).round() as i64
    }

    fn draw(&self, c: &mut Canvas, title: &str, xlabel: &str, ylabel: &str) {
        let th = Canvas::text_height(SCALE);
        for (ticks, vertical) in [(nice_ticks(self.x.0, self.x.1, 6), false), (nice_ticks(self.y.0, self.y.1, 5), true)] {
            let step = if ticks.len() > 1 { ticks[1] - ticks[0] } else { 1.0 };
            for &t in &ticks {
                let label = tick_label(t, step);
                if vertical {
                    let y = self.py(t);
                    c.line(self.left, y, self.left + self.width - 1, y, LIGHT_GRAY, 1);
                    c.line(self.left - 6, y, self.left - 1, y, BLACK, 1);
                    c.text(self.left - 10, y - th / 2, &label, BLACK, SCALE, Align::Right);
                } else {
                    let x = self.px(t);
                    c.line(x, self.top, x, self.top + self.height - 1, LIGHT_GRAY, 1);
                    c.line(x, self.top + self.height, x, self.top + self.height + 5, BLACK, 1);
                    c.text(x, self.top + self.height + 10, &label, BLACK, SCALE, Align::Center);
                }
            }
        }
        c.stroke_rect(self.left, self.top, self.width, self.height, BLACK);
        c.text(self.left + self.width / 2, self.top - th - 14, title, BLACK, SCALE, Align::Center);
        c.text(self.left + self.width / 2, self.top + self.height + th + 22, xlabel, BLACK, SCALE, Align::Center);
        c.text_vertical(self.left - 90, self.top + self.height / 2, ylabel, BLACK, SCALE, Align::Center);
    }

    fn polyline(&self, c: &mut Canvas, pts: &[(f64, f64)], color: Rgb) {
        for w in pts.windows(2) {
            c.line(self.px(w[0].0), self.py(w[0].1), self.px(w[1].0), self.py(w[1].1), color, 3);
        }
        if pts.len() == 1 {
            c.disc(self.px(pts[0].0), self.py(pts[0].1), 3, color);
        }
    }
}

/// Boxed legend with its top-left corner at (`x`, `y`).
fn legend(c: &mut Canvas, x: i64, y: i64, entries: &[(String, Rgb)]) {
    let th = Canvas::text_height(SCALE);
    let row = th + 8;
    let w = entries.iter().map(|(s, _)| Canvas::text_width(s, SCALE)).max().unwrap_or(0) + 56;
    let h = row * entries.len() as i64 + 8;
    c.fill_rect(x, y, w, h, WHITE);
    c.stroke_rect(x, y, w, h, GRAY);
    for (i, (label, color)) in entries.iter().enumerate() {
        let ry = y + 8 + i as i64 * row;
        c.fill_rect(x + 8, ry + th / 2 - 2, 28, 5, *color);
        c.text(x + 44, ry, label, BLACK, SCALE, Align::Left);
    }
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
    (lo - pad, hi + pad)
}

/// Loss and accuracy panels, train and validation series.
pub fn render_training_curves(history: &[EpochMetrics]) -> Result<Canvas, PlotError> {
    if history.is_empty() {
        return Err(PlotError::EmptyHistory);
    }
    let mut c = Canvas::new(1600, 700, WHITE);
    let last = history.last().map(|m| m.epoch).unwrap_or(1) as f64;
    let first = history[0].epoch as f64;
    let xr = if last > first { (first, last) } else { (first - 0.5, first + 0.5) };
    let series = |f: fn(&EpochMetrics) -> f64| history.iter().map(|m| (m.epoch as f64, f(m))).collect::<Vec<_>>();
    let panels: [(&str, &str, Vec<(f64, f64)>, Vec<(f64, f64)>); 2] = [
        ("Loss", "cross-entropy", series(|m| m.train_loss), series(|m| m.val_loss)),
        ("Accuracy", "accuracy", series(|m| m.train_acc), series(|m| m.val_acc)),
    ];
    for (i, (title, ylabel, train, val)) in panels.into_iter().enumerate() {
        let yr = if i == 1 { (0.0, 1.0) } else { (0.0, padded_range(train.iter().chain(&val).map(|p| p.1)).1) };
        let ax = Axes { left: 140 + i as i64 * 800, top: 70, width: 600, height: 500, x: xr, y: yr };
        ax.draw(&mut c, title, "epoch", ylabel);
        ax.polyline(&mut c, &train, palette(0));
        ax.polyline(&mut c, &val, palette(1));
        let entries = [("train".to_string(), palette(0)), ("validation".to_string(), palette(1))];
        legend(&mut c, ax.left + ax.width - 220, ax.top + 12, &entries);
    }
    Ok(c)
}

fn heat_color(frac: f64) -> Rgb {
    let f = frac.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * f).round() as u8;
    [lerp(247.0, 8.0), lerp(251.0, 48.0), lerp(255.0, 107.0)]
}

/// Annotated K×K count grid, true classes on rows.
pub fn render_confusion_heatmap(cm: &ConfusionMatrix) -> Canvas {
    let k = cm.k() as i64;
    let names = cm.class_set.names();
    let label_w = names.iter().map(|n| Canvas::text_width(n, SCALE)).max().unwrap_or(0);
    let cell = 72;
    let left = label_w + 120;
    let top = 90;
    let grid = cell * k;
    let mut c = Canvas::new((left + grid + 60) as usize, (top + grid + label_w + 110) as usize, WHITE);
    let max = cm.counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    let th = Canvas::text_height(SCALE);
    for (i, row) in cm.counts.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let (x, y) = (left + j as i64 * cell, top + i as i64 * cell);
            let frac = v as f64 / max;
            c.fill_rect(x, y, cell, cell, heat_color(frac));
            let ink = if frac > 0.5 { WHITE } else { BLACK };
            c.text(x + cell / 2, y + (cell - th) / 2, &v.to_string(), ink, SCALE, Align::Center);
        }
    }
    for i in 0..=k {
        c.line(left, top + i * cell, left + grid, top + i * cell, GRAY, 1);
        c.line(left + i * cell, top, left + i * cell, top + grid, GRAY, 1);
    }
    for (i, name) in names.iter().enumerate() {
        let mid = i as i64 * cell + cell / 2;
        c.text(left - 10, top + mid - th / 2, name, BLACK, SCALE, Align::Right);
        c.text_vertical(left + mid - th / 2, top + grid + 10, name, BLACK, SCALE, Align::Right);
    }
    c.text(left + grid / 2, 30, "Confusion matrix", BLACK, SCALE, Align::Center);
    c.text(left + grid / 2, top + grid + label_w + 40, "predicted class", BLACK, SCALE, Align::Center);
    c.text_vertical(20, top + grid / 2, "true class", BLACK, SCALE, Align::Center);
    c
}

fn dashed(c: &mut Canvas, ax: &Axes, from: (f64, f64), to: (f64, f64), color: Rgb) {
    let n = 40;
    for s in (0..n).step_by(2) {
        let t0 = s as f64 / n as f64;
        let t1 = (s + 1) as f64 / n as f64;
        let p = |t: f64| (from.0 + (to.0 - from.0) * t, from.1 + (to.1 - from.1) * t);
        let (a, b) = (p(t0), p(t1));
        c.line(ax.px(a.0), ax.py(a.1), ax.px(b.0), ax.py(b.1), color, 1);
    }
}

/// One-vs-rest curves with AUC in the legend; omitted classes are listed.
pub fn render_roc(eval: &Evaluation) -> Canvas {
    let names = eval.confusion.class_set.names();
    let mut c = Canvas::new(1400, 900, WHITE);
    let ax = Axes { left: 140, top: 70, width: 700, height: 700, x: (0.0, 1.0), y: (0.0, 1.0) };
    ax.draw(&mut c, "ROC (one-vs-rest)", "false positive rate", "true positive rate");
    dashed(&mut c, &ax, (0.0, 0.0), (1.0, 1.0), GRAY);
    let mut entries = Vec::new();
    for curve in &eval.roc {
        let color = palette(curve.class_index);
        ax.polyline(&mut c, &curve.points, color);
        entries.push((format!("{} (AUC {:.3})", names[curve.class_index], curve.auc), color));
    }
    for &o in &eval.roc_omitted {
        entries.push((format!("{}: omitted, single-class split", names[o]), LIGHT_GRAY));
    }
    legend(&mut c, ax.left + ax.width + 30, ax.top, &entries);
    c
}

/// Scatter of embedded points colored by class.
pub fn render_embedding(emb: &Embedding2D, class_set: &ClassSet) -> Result<Canvas, PlotError> {
    if emb.coords.is_empty() {
        return Err(PlotError::EmptyEmbedding);
    }
    let mut c = Canvas::new(1400, 900, WHITE);
    let ax = Axes {
        left: 140,
        top: 70,
        width: 800,
        height: 700,
        x: padded_range(emb.coords.iter().map(|p| p[0])),
        y: padded_range(emb.coords.iter().map(|p| p[1])),
    };
    ax.draw(&mut c, "t-SNE of ensemble features", "dimension 1", "dimension 2");
    for (p, &l) in emb.coords.iter().zip(&emb.labels) {
        c.disc(ax.px(p[0]), ax.py(p[1]), 5, palette(l));
    }
    let mut present: Vec<usize> = emb.labels.clone();
    present.sort_unstable();
    present.dedup();
    let entries: Vec<(String, Rgb)> = present
        .iter()
        .map(|&l| (class_set.names().get(l).cloned().unwrap_or_else(|| l.to_string()), palette(l)))
        .collect();
    legend(&mut c, ax.left + ax.width + 30, ax.top, &entries);
    Ok(c)
}

/// `curves.png` and `curves.csv`.
pub fn save_training_curves(history: &[EpochMetrics], dir: &Path) -> Result<(), PlotError> {
    render_training_curves(history)?.write_png(&dir.join("curves.png"))?;
    write_text(&dir.join("curves.csv"), &history_to_csv(history))
}

/// `confusion.png` and `confusion.csv`.
pub fn save_confusion(cm: &ConfusionMatrix, dir: &Path) -> Result<(), PlotError> {
    render_confusion_heatmap(cm).write_png(&dir.join("confusion.png"))?;
    write_text(&dir.join("confusion.csv"), &cm.to_csv())
}

/// `roc.png` and `roc.json`.
pub fn save_roc(eval: &Evaluation, dir: &Path) -> Result<(), PlotError> {
    render_roc(eval).write_png(&dir.join("roc.png"))?;
    let json = serde_json::to_string_pretty(&eval.roc_json()).expect("json values serialize") + "\n";
    write_text(&dir.join("roc.json"), &json)
}

/// `tsne.png` and `tsne.csv`.
pub fn save_embedding(emb: &Embedding2D, class_set: &ClassSet, dir: &Path) -> Result<(), PlotError> {
    render_embedding(emb, class_set)?.write_png(&dir.join("tsne.png"))?;
    write_text(&dir.join("tsne.csv"), &emb.to_csv())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{confusion_matrix, evaluate_probs};
    use crate::nn::Matrix;
    use crate::training::parse_history_csv;

    fn history(n: usize) -> Vec<EpochMetrics> {
        (1..=n)
            .map(|e| EpochMetrics {
                epoch: e,
                train_loss: 2.0 / e as f64,
                val_loss: 2.2 / e as f64 + 0.1,
                train_acc: 1.0 - 0.9 / e as f64,
                val_acc: 0.8 - 0.7 / e as f64,
            })
            .collect()
    }

    fn classes(k: usize) -> ClassSet {
        ClassSet::new((0..k).map(|i| format!("Class {i}"))).unwrap()
    }

    #[test]
    fn nice_ticks_are_round() {
        assert_eq!(nice_ticks(0.0, 1.0, 5), vec![0.0, 0.2, 0.4, 0.6000000000000001, 0.8, 1.0]);
        assert_eq!(nice_ticks(1.0, 50.0, 6), vec![10.0, 20.0, 30.0, 40.0, 50.0]);
        assert_eq!(tick_label(0.6000000000000001, 0.2), "0.6");
    }

    #[test]
    fn curves_and_twin() {
        let dir = tempfile::tempdir().unwrap();
        for n in [1, 50] {
            let h = history(n);
            save_training_curves(&h, dir.path()).unwrap();
            assert!(std::fs::metadata(dir.path().join("curves.png")).unwrap().len() > 0);
            let csv = std::fs::read_to_string(dir.path().join("curves.csv")).unwrap();
            assert_eq!(csv.lines().count(), n + 1);
            assert_eq!(parse_history_csv(&csv).unwrap(), h);
        }
        assert!(matches!(render_training_curves(&[]), Err(PlotError::EmptyHistory)));
    }

    #[test]
    fn heatmap_cells_reflect_counts() {
        let t: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let cm = confusion_matrix(&t, &t, &classes(10)).unwrap();
        let c = render_confusion_heatmap(&cm);
        let names_w = Canvas::text_width("Class 0", SCALE);
        let (left, top, cell) = (names_w + 120, 90, 72);
        // a diagonal cell is darkest, an empty one is near white
        assert_eq!(c.get((left + 3) as usize, (top + 3) as usize), heat_color(1.0));
        assert_eq!(c.get((left + cell + 3) as usize, (top + 3) as usize), heat_color(0.0));
    }

    #[test]
    fn roc_and_embedding_render() {
        let probs = Matrix::from_rows(&[vec![0.7, 0.2, 0.1], vec![0.1, 0.8, 0.1], vec![0.6, 0.3, 0.1]]);
        let eval = evaluate_probs(&probs, &[0, 1, 0], &classes(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_roc(&eval, dir.path()).unwrap();
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("roc.json")).unwrap()).unwrap();
        assert_eq!(json["curves"].as_array().unwrap().len(), 2);
        assert_eq!(json["omitted"][0], "Class 2");

        let emb = Embedding2D {
            coords: (0..100).map(|i| [(i as f64).cos() * i as f64, (i as f64).sin()]).collect(),
            labels: (0..100).map(|i| i % 3).collect(),
            final_kl: 0.1,
            first_kl: 1.0,
            perplexity: 30.0,
        };
        save_embedding(&emb, &classes(3), dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("tsne.csv")).unwrap();
        assert_eq!(csv.lines().count(), 101);
        assert!(dir.path().join("tsne.png").exists());
    }
}
