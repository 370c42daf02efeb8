//! `capsule`: train, evaluate, predict, visualize and synth commands.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data or I/O error,
//! 4 training aborted, 5 checkpoint error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use capsule_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CheckpointMeta};
use capsule_core::config::{derive_seed, stream, RunConfig};
use capsule_core::dataset::{list_images, load_image, scan_dataset, stratified_split, ClassSet, LabeledFrame, Split};
use capsule_core::evaluation::evaluate_probs;
use capsule_core::inference::{predict_split, write_predictions};
use capsule_core::nn::EnsembleModel;
use capsule_core::plot;
use capsule_core::preprocess::{resize, PreparedSplit};
use capsule_core::synth::{write_dataset, SynthError, SynthSpec};
use capsule_core::training::{fit, write_history, EpochMetrics};
use capsule_core::tsne::{tsne_embed, TsneConfig};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_TRAIN: u8 = 4;
const EXIT_CHECKPOINT: u8 = 5;

const EVAL_BATCH: usize = 32;

#[derive(Parser)]
#[command(
    name = "capsule",
    version,
    about = "Ensemble classifier for capsule endoscopy frames",
    after_help = "Exit codes: 0 ok, 2 config error, 3 data/IO error, 4 training aborted, 5 checkpoint error.\n\
                  The SEED environment variable overrides the config seed."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Scan, split and train; writes history, curves and best.ckpt to output_dir.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Metrics, confusion matrix and ROC curves for one split.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Output directory (defaults to the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Class predictions for an image or a directory of images.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// t-SNE of the ensemble features of one split.
    Visualize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Output directory (defaults to the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes a separable synthetic dataset in the class-per-directory layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Side length of the square frames.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Prints the default configuration as TOML.
    DefaultConfig,
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl std::fmt::Display) -> Failure {
    Failure { code, message: message.to_string() }
}

fn checkpoint_failure(e: CheckpointError) -> Failure {
    fail(EXIT_CHECKPOINT, e)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config } => cmd_train(&config),
        Command::Evaluate { ckpt, data, split, out } => cmd_evaluate(&ckpt, &data, split, out),
        Command::Predict { ckpt, input, out } => cmd_predict(&ckpt, &input, &out),
        Command::Visualize { ckpt, data, split, out } => cmd_visualize(&ckpt, &data, split, out),
        Command::Synth { out, per_class, seed, size } => cmd_synth(&out, per_class, seed, size),
        Command::DefaultConfig => {
            print!("{}", RunConfig::default().to_toml());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| fail(EXIT_DATA, format!("cannot create {}: {e}", dir.display())))
}

fn cmd_train(config_path: &Path) -> Result<(), Failure> {
    let cfg = RunConfig::load(config_path).map_err(|e| fail(EXIT_CONFIG, e))?;
    let manifest = scan_dataset(&cfg.data_root, cfg.class_set()).map_err(|e| fail(EXIT_DATA, e))?;
    let manifest = stratified_split(&manifest, &cfg.split_spec()).map_err(|e| fail(EXIT_DATA, e))?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    manifest.write_csv(&out.join("manifest.csv")).map_err(|e| fail(EXIT_DATA, e))?;

    let pipeline = cfg.pipeline();
    let train = PreparedSplit::load(&manifest.frames_in(Split::Train), &pipeline).map_err(|e| fail(EXIT_DATA, e))?;
    let val = PreparedSplit::load(&manifest.frames_in(Split::Val), &pipeline).map_err(|e| fail(EXIT_DATA, e))?;
    log::info!(
        "{} classes, {} train / {} val frames, {} skipped",
        manifest.class_set.len(),
        train.len(),
        val.len(),
        manifest.skipped.len()
    );

    let class_set = manifest.class_set.clone();
    let mut model =
        EnsembleModel::new(&cfg.model_config(class_set.len()), class_set.clone()).map_err(|e| fail(EXIT_CONFIG, e))?;
    if let Some(path) = &cfg.model.pretrained {
        let ckpt = load_checkpoint(path).map_err(checkpoint_failure)?;
        ckpt.restore_into(&mut model).map_err(checkpoint_failure)?;
        log::info!("initialized from {}", path.display());
    }

    let meta = CheckpointMeta { pipeline: pipeline.clone(), split: Some(cfg.split_spec()), config_echo: cfg.echo() };
    let training = cfg.training();
    let (history, best, abort) = match fit(&mut model, &train, &val, &pipeline, &training, meta) {
        Ok(o) => (o.history, Some(o.best), None),
        Err(a) => (a.history.clone(), a.best.clone(), Some(a)),
    };
    write_training_outputs(out, &history, best.as_ref())?;
    match abort {
        Some(a) => Err(fail(EXIT_TRAIN, a)),
        None => {
            let best = best.expect("successful fit has a best checkpoint");
            println!("best val_acc {:.4} at epoch {}", best.best_val_acc, best.epoch);
            Ok(())
        }
    }
}

fn write_training_outputs(out: &Path, history: &[EpochMetrics], best: Option<&Checkpoint>) -> Result<(), Failure> {
    write_history(history, &out.join("history.csv"), &out.join("history.json")).map_err(|e| fail(EXIT_DATA, e))?;
    if !history.is_empty() {
        plot::save_training_curves(history, out).map_err(|e| fail(EXIT_DATA, e))?;
    }
    if let Some(ckpt) = best {
        save_checkpoint(ckpt, &out.join("best.ckpt")).map_err(checkpoint_failure)?;
    }
    Ok(())
}

/// Loads a checkpoint and the frames of `split` from `data`, labelled in the
/// checkpoint's class order.
fn checkpoint_and_frames(ckpt_path: &Path, data: &Path, split: SplitArg) -> Result<(Checkpoint, Vec<LabeledFrame>), Failure> {
    let ckpt = load_checkpoint(ckpt_path).map_err(checkpoint_failure)?;
    let found = scan_dataset(data, None).map_err(|e| fail(EXIT_DATA, e))?;
    check_classes(&ckpt.class_set, &found.class_set)?;
    let manifest = scan_dataset(data, Some(ckpt.class_set.clone())).map_err(|e| fail(EXIT_DATA, e))?;
    let frames = match split {
        SplitArg::All => manifest.frames,
        SplitArg::Train | SplitArg::Val => {
            let spec = ckpt
                .meta
                .split
                .ok_or_else(|| fail(EXIT_CHECKPOINT, "checkpoint records no split; use --split all"))?;
            let which = if matches!(split, SplitArg::Train) { Split::Train } else { Split::Val };
            stratified_split(&manifest, &spec).map_err(|e| fail(EXIT_DATA, e))?.frames_in(which)
        }
    };
    Ok((ckpt, frames))
}

fn check_classes(expected: &ClassSet, found: &ClassSet) -> Result<(), Failure> {
    let mut a = expected.names().to_vec();
    let mut b = found.names().to_vec();
    a.sort();
    b.sort();
    if a != b {
        return Err(fail(
            EXIT_CHECKPOINT,
            format!(
                "checkpoint was trained on {} classes {:?}, data has {} classes {:?}",
                expected.len(),
                expected.names(),
                found.len(),
                found.names()
            ),
        ));
    }
    Ok(())
}

fn output_dir(out: Option<PathBuf>, ckpt: &Path) -> PathBuf {
    out.unwrap_or_else(|| ckpt.parent().map(Path::to_path_buf).unwrap_or_default())
}

fn batch_size(ckpt: &Checkpoint) -> usize {
    RunConfig::from_echo(&ckpt.meta.config_echo).map_or(EVAL_BATCH, |c| c.train.batch_size)
}

fn cmd_evaluate(ckpt_path: &Path, data: &Path, split: SplitArg, out: Option<PathBuf>) -> Result<(), Failure> {
    let (ckpt, frames) = checkpoint_and_frames(ckpt_path, data, split)?;
    if frames.is_empty() {
        return Err(fail(EXIT_DATA, "the selected split is empty"));
    }
    let pipeline = &ckpt.meta.pipeline;
    let prepared = PreparedSplit::load(&frames, pipeline).map_err(|e| fail(EXIT_DATA, e))?;
    let mut model = ckpt.to_model().map_err(checkpoint_failure)?;
    let preds = predict_split(&mut model, &prepared, pipeline, batch_size(&ckpt)).map_err(|e| fail(EXIT_CHECKPOINT, e))?;
    let eval = evaluate_probs(&preds.probs, &preds.labels, &ckpt.class_set).map_err(|e| fail(EXIT_DATA, e))?;

    let out = output_dir(out, ckpt_path);
    create_dir(&out)?;
    eval.write_report(&out.join("report.json")).map_err(|e| fail(EXIT_DATA, e))?;
    plot::save_confusion(&eval.confusion, &out).map_err(|e| fail(EXIT_DATA, e))?;
    plot::save_roc(&eval, &out).map_err(|e| fail(EXIT_DATA, e))?;
    println!("frames     {}", frames.len());
    println!("accuracy   {:.4}", eval.report.accuracy);
    println!("macro_f1   {:.4}", eval.report.macro_f1);
    println!("micro_f1   {:.4}", eval.report.micro_f1);
    Ok(())
}

fn cmd_predict(ckpt_path: &Path, input: &Path, out: &Path) -> Result<(), Failure> {
    let ckpt = load_checkpoint(ckpt_path).map_err(checkpoint_failure)?;
    let candidates = list_images(input).map_err(|e| fail(EXIT_DATA, e))?;
    let size = ckpt.meta.pipeline.input_size;
    let mut images = Vec::new();
    let mut paths = Vec::new();
    for path in candidates {
        match load_image(&path) {
            Ok(img) => {
                images.push(resize(&img, size, size));
                paths.push(path);
            }
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    if images.is_empty() {
        return Err(fail(EXIT_DATA, format!("no decodable images under {}", input.display())));
    }
    let n = images.len();
    let prepared = PreparedSplit::from_images(images, vec![0; n]);
    let mut model = ckpt.to_model().map_err(checkpoint_failure)?;
    let preds =
        predict_split(&mut model, &prepared, &ckpt.meta.pipeline, batch_size(&ckpt)).map_err(|e| fail(EXIT_CHECKPOINT, e))?;
    create_dir(out)?;
    write_predictions(&paths, &preds.probs, &ckpt.class_set, out).map_err(|e| fail(EXIT_DATA, e))?;
    println!("{n} frames -> {}", out.join("predictions.csv").display());
    Ok(())
}

fn cmd_visualize(ckpt_path: &Path, data: &Path, split: SplitArg, out: Option<PathBuf>) -> Result<(), Failure> {
    let (ckpt, frames) = checkpoint_and_frames(ckpt_path, data, split)?;
    const MIN_FRAMES: usize = 8;
    if frames.len() < MIN_FRAMES {
        return Err(fail(EXIT_DATA, format!("t-SNE needs at least {MIN_FRAMES} frames, the split has {}", frames.len())));
    }
    let tsne_cfg = match RunConfig::from_echo(&ckpt.meta.config_echo) {
        Some(cfg) => cfg.tsne(),
        None => TsneConfig { seed: derive_seed(0, stream::TSNE), ..TsneConfig::default() },
    };
    let pipeline = &ckpt.meta.pipeline;
    let prepared = PreparedSplit::load(&frames, pipeline).map_err(|e| fail(EXIT_DATA, e))?;
    let mut model = ckpt.to_model().map_err(checkpoint_failure)?;
    let preds = predict_split(&mut model, &prepared, pipeline, batch_size(&ckpt)).map_err(|e| fail(EXIT_CHECKPOINT, e))?;
    let emb = tsne_embed(&preds.features, &preds.labels, &tsne_cfg).map_err(|e| fail(EXIT_DATA, e))?;
    let out = output_dir(out, ckpt_path);
    create_dir(&out)?;
    plot::save_embedding(&emb, &ckpt.class_set, &out).map_err(|e| fail(EXIT_DATA, e))?;
    println!(
        "{} frames, perplexity {:.1}, KL {:.4} -> {:.4}",
        frames.len(),
        emb.perplexity,
        emb.first_kl,
        emb.final_kl
    );
    Ok(())
}

fn cmd_synth(out: &Path, per_class: usize, seed: u64, size: usize) -> Result<(), Failure> {
    let spec = SynthSpec { per_class, seed, size, ..SynthSpec::default() };
    let files = write_dataset(out, &spec).map_err(|e| match e {
        SynthError::Invalid(_) => fail(EXIT_CONFIG, e),
        _ => fail(EXIT_DATA, e),
    })?;
    println!("{} frames in {} classes under {}", files.len(), spec.classes.len(), out.display());
    Ok(())
}
