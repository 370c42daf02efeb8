use capsule_core::checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, CheckpointError, CheckpointMeta};
use capsule_core::config::RunConfig;
use capsule_core::dataset::{scan_dataset, stratified_split, ClassSet, Split};
use capsule_core::inference::predict_split;
use capsule_core::nn::{EnsembleModel, ModelVariant};
use capsule_core::preprocess::PreparedSplit;
use capsule_core::synth::{write_dataset, SynthSpec};
use capsule_core::training::{fit, parse_history_csv, write_history};

fn tiny_run(root: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::from_toml_str("seed = 3\n[train]\nlr = 0.001\nepochs = 3\nbatch_size = 16\n").unwrap();
    cfg.data_root = root.to_path_buf();
    cfg.input.size = 24;
    cfg.model.variant = ModelVariant::Tiny;
    cfg
}

#[test]
fn synth_scan_split_fit_checkpoint_predict() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let spec = SynthSpec { per_class: 5, seed: 2, size: 24, ..Default::default() };
    write_dataset(&data, &spec).unwrap();
    let cfg = tiny_run(&data);

    let manifest = scan_dataset(&data, None).unwrap();
    assert_eq!(manifest.class_set.len(), 10);
    assert_eq!(manifest.frames.len(), 50);
    let manifest = stratified_split(&manifest, &cfg.split_spec()).unwrap();
    let (train_frames, val_frames) = (manifest.frames_in(Split::Train), manifest.frames_in(Split::Val));
    for c in 0..10 {
        assert_eq!(train_frames.iter().filter(|f| f.label == c).count(), 4);
        assert_eq!(val_frames.iter().filter(|f| f.label == c).count(), 1);
    }

    let pipeline = cfg.pipeline();
    let train = PreparedSplit::load(&train_frames, &pipeline).unwrap();
    let val = PreparedSplit::load(&val_frames, &pipeline).unwrap();
    let class_set = manifest.class_set.clone();
    let mut model = EnsembleModel::new(&cfg.model_config(10), class_set.clone()).unwrap();
    let meta = CheckpointMeta { pipeline: pipeline.clone(), split: Some(cfg.split_spec()), config_echo: cfg.echo() };
    let outcome = fit(&mut model, &train, &val, &pipeline, &cfg.training(), meta).unwrap();
    assert_eq!(outcome.history.len(), 3);
    assert!(outcome.history.iter().all(|m| m.train_loss.is_finite() && (0.0..=1.0).contains(&m.val_acc)));
    let best_acc = outcome.history.iter().map(|m| m.val_acc).fold(0.0, f64::max);
    assert_eq!(outcome.best.best_val_acc, best_acc);

    let (csv, json) = (dir.path().join("h.csv"), dir.path().join("h.json"));
    write_history(&outcome.history, &csv, &json).unwrap();
    assert_eq!(parse_history_csv(&std::fs::read_to_string(&csv).unwrap()).unwrap(), outcome.history);

    let ckpt_path = dir.path().join("best.ckpt");
    save_checkpoint(&outcome.best, &ckpt_path).unwrap();
    let mut direct = outcome.best.to_model().unwrap();
    let mut reloaded = load_checkpoint(&ckpt_path).unwrap().to_model().unwrap();
    let a = predict_split(&mut direct, &val, &pipeline, 4).unwrap();
    let b = predict_split(&mut reloaded, &val, &pipeline, 7).unwrap();
    assert_eq!(a, b);
    for row in a.probs.iter_rows() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    let echoed = RunConfig::from_echo(&load_checkpoint(&ckpt_path).unwrap().meta.config_echo).unwrap();
    assert_eq!(echoed, cfg);
    let five = ClassSet::new(class_set.names()[..5].to_vec()).unwrap();
    assert!(matches!(load_checkpoint_for(&ckpt_path, &five), Err(CheckpointError::IncompatibleConfig(_))));
}

#[test]
fn same_seed_same_history() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { per_class: 3, seed: 8, size: 24, classes: vec!["a".into(), "b".into(), "c".into()] };
    write_dataset(dir.path(), &spec).unwrap();
    let cfg = tiny_run(dir.path());
    let run = || {
        let manifest = stratified_split(&scan_dataset(dir.path(), None).unwrap(), &cfg.split_spec()).unwrap();
        let pipeline = cfg.pipeline();
        let train = PreparedSplit::load(&manifest.frames_in(Split::Train), &pipeline).unwrap();
        let val = PreparedSplit::load(&manifest.frames_in(Split::Val), &pipeline).unwrap();
        let mut model = EnsembleModel::new(&cfg.model_config(3), manifest.class_set.clone()).unwrap();
        fit(&mut model, &train, &val, &pipeline, &cfg.training(), CheckpointMeta::default()).unwrap().history
    };
    let (h1, h2) = (run(), run());
    assert_eq!(h1, h2);
}
