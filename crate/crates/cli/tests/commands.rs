use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn capsule(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capsule"))
        .args(args)
        .env_remove("SEED")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Fixture {
    _dir: TempDir,
    root: PathBuf,
    /// Ten classes, four frames each.
    full: PathBuf,
    /// Three of those classes.
    small: PathBuf,
    ckpt: PathBuf,
}

fn write_config(path: &Path, data: &Path, out: &Path, extra: &str) {
    let text = format!(
        "data_root = {:?}\noutput_dir = {:?}\n[input]\nsize = 16\n[model]\nvariant = \"tiny\"\n[train]\nepochs = 2\nlr = 0.001\n{extra}",
        s(data),
        s(out)
    );
    std::fs::write(path, text).unwrap();
}

/// A tiny checkpoint trained on the three-class dataset.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let full = root.join("full");
        let o = capsule(&["synth", "--out", s(&full), "--per-class", "4", "--seed", "1", "--size", "16"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let small = root.join("small");
        for class in ["Angioectasia", "Bleeding", "Erosion"] {
            std::fs::create_dir_all(small.join(class)).unwrap();
            for entry in std::fs::read_dir(full.join(class)).unwrap() {
                let p = entry.unwrap().path();
                std::fs::copy(&p, small.join(class).join(p.file_name().unwrap())).unwrap();
            }
        }
        let config = root.join("small.toml");
        write_config(&config, &small, &root.join("run"), "");
        let o = capsule(&["train", "--config", s(&config)]);
        assert!(o.status.success(), "{}", stderr(&o));
        Fixture { ckpt: root.join("run/best.ckpt"), _dir: dir, root, full, small }
    })
}

#[test]
fn train_writes_outputs() {
    let f = fixture();
    for name in ["best.ckpt", "history.csv", "history.json", "curves.png", "curves.csv", "manifest.csv"] {
        assert!(f.root.join("run").join(name).is_file(), "{name}");
    }
    let history = std::fs::read_to_string(f.root.join("run/history.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("epoch,train_loss,val_loss,train_acc,val_acc"));
    assert_eq!(history.lines().count(), 3);
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.toml");
    std::fs::write(&config, "[train]\nlearning_rte = 0.1\n").unwrap();
    let o = capsule(&["train", "--config", s(&config)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rte"), "{}", stderr(&o));
    assert_eq!(capsule(&["train", "--config", s(&dir.path().join("absent.toml"))]).status.code(), Some(2));
}

#[test]
fn missing_data_root_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.toml");
    write_config(&config, &dir.path().join("nowhere"), &dir.path().join("out"), "");
    assert_eq!(capsule(&["train", "--config", s(&config)]).status.code(), Some(3));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn diverging_training_exits_4_and_keeps_history() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.toml");
    write_config(&config, &f.small, &dir.path().join("out"), "lr = 1e300\n");
    let text = std::fs::read_to_string(&config).unwrap().replace("lr = 0.001\n", "");
    std::fs::write(&config, text).unwrap();
    let o = capsule(&["train", "--config", s(&config)]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(dir.path().join("out/history.csv").is_file());
}

#[test]
fn evaluate_writes_report_and_prints_metrics() {
    let f = fixture();
    let out = f.root.join("eval_all");
    let o = capsule(&["evaluate", "--ckpt", s(&f.ckpt), "--data", s(&f.small), "--split", "all", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("accuracy") && text.contains("macro_f1") && text.contains("micro_f1"), "{text}");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    for key in ["classes", "accuracy", "macro_f1", "micro_f1", "auc"] {
        assert!(report.get(key).is_some(), "{key}");
    }
    assert_eq!(report["accuracy"], report["micro_f1"]);
    let support: u64 = report["classes"].as_object().unwrap().values().map(|c| c["support"].as_u64().unwrap()).sum();
    assert_eq!(support, 12);
    for name in ["confusion.csv", "confusion.png", "roc.json", "roc.png"] {
        assert!(out.join(name).is_file(), "{name}");
    }
}

#[test]
fn evaluate_with_other_class_count_exits_5() {
    let f = fixture();
    let out = f.root.join("eval_mismatch");
    let o = capsule(&["evaluate", "--ckpt", s(&f.ckpt), "--data", s(&f.full), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
}

#[test]
fn corrupt_checkpoint_exits_5() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    let mut bytes = std::fs::read(&f.ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xFF;
    std::fs::write(&bad, bytes).unwrap();
    let o = capsule(&["predict", "--ckpt", s(&bad), "--input", s(&f.small), "--out", s(&dir.path().join("p"))]);
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn visualize_needs_eight_frames() {
    let f = fixture();
    let out = f.root.join("viz_small");
    let o = capsule(&["visualize", "--ckpt", s(&f.ckpt), "--data", s(&f.small), "--split", "val", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    let o = capsule(&["visualize", "--ckpt", s(&f.ckpt), "--data", s(&f.small), "--split", "all", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<String> = std::fs::read_to_string(out.join("tsne.csv")).unwrap().lines().map(String::from).collect();
    assert_eq!(rows[0], "x,y,label");
    assert_eq!(rows.len(), 13);
    assert!(out.join("tsne.png").is_file());
}

#[test]
fn predict_directory_single_file_and_duplicates() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    std::fs::create_dir_all(&input).unwrap();
    let sources: Vec<PathBuf> = std::fs::read_dir(f.small.join("Bleeding")).unwrap().map(|e| e.unwrap().path()).collect();
    for (i, src) in sources.iter().chain(&sources[..1]).enumerate() {
        std::fs::copy(src, input.join(format!("{i}.png"))).unwrap();
    }
    let out = dir.path().join("out");
    let o = capsule(&["predict", "--ckpt", s(&f.ckpt), "--input", s(&input), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("predictions.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    let strip = |r: &str| r.split_once(',').unwrap().1.to_string();
    assert_eq!(strip(rows[0]), strip(rows[4]));
    let probs: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("probabilities.json")).unwrap()).unwrap();
    for row in probs["predictions"].as_array().unwrap() {
        let p: Vec<f64> = row["probabilities"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert_eq!(p.len(), 3);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let conf = p.iter().cloned().fold(0.0, f64::max);
        let line = rows.iter().find(|r| r.starts_with(row["path"].as_str().unwrap())).unwrap();
        assert_eq!(line.rsplit(',').next().unwrap().parse::<f64>().unwrap(), conf);
    }

    let single = dir.path().join("single");
    let o = capsule(&["predict", "--ckpt", s(&f.ckpt), "--input", s(&input.join("0.png")), "--out", s(&single)]);
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(single.join("predictions.csv")).unwrap().lines().count(), 2);
}

#[test]
fn predict_without_images_exits_3() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("broken.png"), b"not an image").unwrap();
    let o = capsule(&["predict", "--ckpt", s(&f.ckpt), "--input", s(dir.path()), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn synth_layout_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert!(capsule(&["synth", "--out", s(d), "--per-class", "10", "--seed", "3", "--size", "16"]).status.success());
    }
    let classes: Vec<PathBuf> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(classes.len(), 10);
    let mut files = 0;
    for class in &classes {
        for entry in std::fs::read_dir(class).unwrap() {
            let p = entry.unwrap().path();
            assert_eq!(p.extension().unwrap(), "png");
            let twin = b.join(p.strip_prefix(&a).unwrap());
            assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(twin).unwrap());
            files += 1;
        }
    }
    assert_eq!(files, 100);
}

#[test]
fn synth_to_unwritable_path_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("file");
    std::fs::write(&file, b"x").unwrap();
    let o = capsule(&["synth", "--out", s(&file.join("sub")), "--per-class", "1"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn seed_env_overrides_config_seed() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.toml");
    write_config(&config, &f.small, &dir.path().join("out"), "epochs = 1\n");
    let text = std::fs::read_to_string(&config).unwrap().replace("epochs = 2\n", "");
    std::fs::write(&config, text).unwrap();
    let run = |seed: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_capsule"))
            .args(["train", "--config", s(&config)])
            .env("SEED", seed)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read_to_string(dir.path().join("out/manifest.csv")).unwrap()
    };
    let (a, b, c) = (run("1"), run("2"), run("1"));
    assert_eq!(a, c);
    assert_ne!(a, b);
}
