use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use styleam::analysis::analyze_styles;
use styleam::data::{generate_toy_domains, Dataset, Manifest};
use styleam::nn::Checkpoint;
use styleam::trainer::{evaluate, run_training, TrainingConfig};
use styleam::Error;

const CONFIG_HELP: &str = "\
The config file is a JSON object; unknown keys are rejected and relative
paths resolve against the file's directory. Keys and defaults:

  mode               \"toy\" | \"full\"                          toy
  alpha              Beta(alpha, alpha) mixing, > 0              0.65
  tau                SROCC threshold for relaxation, [-1, 1]     0.9
  lambda_adv         adversarial loss weight, >= 0               2.0
  mixup_prob         probability of the mixed branch, [0, 1]     0.5
  lr                 Adam learning rate, > 0                     1e-3 toy / 1e-4 full
  weight_decay       L2 penalty, >= 0                            5e-4
  pretrain_epochs    source-only epochs                          5
  uda_epochs         adaptation epochs                           30 toy / 50 full
  batch_size         per domain, >= 2                            16
  crop               multiple of 2^stages                        64 toy / 384 full
  seed               random seed                                 0
  mixup_mode         style_mixup | feature_mixup |
                     mixstyle_no_label | none                    style_mixup
  alignment_space    style | feature | none                      style
  lambda_mode        per_sample | per_batch                      per_sample
  srocc_window       batch | running_average                     batch
  source_manifest    labeled CSV (path,score)                    required
  source_scale       {convention, raw_range}                     mos_higher_better, [0, 5]
  target_manifest    CSV of target images                        required unless alignment none
  target_eval_scores eval-only target labels                     none
  target_eval_scale  {convention, raw_range}                     mos_higher_better, [0, 5]
  normalization      {mean: [3], std: [3]}                       0.5/0.5 toy, ImageNet full
  backbone_weights   checkpoint with backbone.* tensors          none
  cache_images       decode all images up front                  true
  output_dir         run directory                               output
  analyze_stages     stages exported by analyze-styles           all";

#[derive(Parser)]
#[command(name = "styleam", version, about = "Style-space domain adaptation for no-reference image quality assessment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-domain toy benchmark.
    MakeToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        n_source: usize,
        #[arg(long, default_value_t = 400)]
        n_target: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretrain on the source domain, adapt to the target, evaluate.
    #[command(after_long_help = CONFIG_HELP)]
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Pretrain checkpoint to continue from; skips pretraining.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a labeled image set; prints metrics JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV listing the images.
        #[arg(long)]
        manifest: PathBuf,
        /// CSV with the labels of the same images.
        #[arg(long)]
        scores: PathBuf,
        /// Optional per-sample CSV of predictions.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Export per-stage style vectors and their correlation with quality.
    AnalyzeStyles {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        /// Comma-separated 1-based stages; all when omitted.
        #[arg(long, value_delimiter = ',')]
        stages: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "source")]
        domain: String,
    },
}

/// Exit codes: 2 usage or configuration, 3 I/O, 4 runtime failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Input(_) | Error::Parse { .. } | Error::Shape(_) => 2,
        Error::Io { .. } | Error::Image { .. } | Error::Checkpoint(_) => 3,
        Error::UndefinedMetric(_) | Error::Training(_) => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> styleam::Result<()> {
    match cmd {
        Command::MakeToy {
            out,
            n_source,
            n_target,
            seed,
        } => {
            let toy = generate_toy_domains(&out, n_source, n_target, seed)?;
            println!("{}", toy.source_manifest.display());
            println!("{}", toy.target_manifest.display());
            Ok(())
        }
        Command::Train { config, resume } => {
            let cfg = TrainingConfig::load(&config)?;
            cfg.validate()?;
            let run = run_training(&cfg, resume.as_deref())?;
            println!("{}", run.checkpoint.display());
            if let Some(p) = &run.metrics_path {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            manifest,
            scores,
            dump,
        } => {
            let (ck, cfg) = load_checkpoint(&checkpoint)?;
            let model = ck.to_model()?;
            let images = Manifest::load(&manifest)?;
            let labels = Manifest::load(&scores)?;
            let out = evaluate(
                &model,
                &images,
                &labels,
                &cfg.target_eval_scale,
                cfg.crop(),
                &cfg.normalization(),
                cfg.batch_size,
            )?;
            if let Some(path) = dump {
                write_dump(&path, &out.paths, &out.predictions, &out.labels)?;
            }
            println!("{}", serde_json::to_string_pretty(&out.report).expect("serializable"));
            Ok(())
        }
        Command::AnalyzeStyles {
            checkpoint,
            manifest,
            scores,
            stages,
            out,
            domain,
        } => {
            let (ck, cfg) = load_checkpoint(&checkpoint)?;
            let model = ck.to_model()?;
            let images = Manifest::load(&manifest)?;
            let labels = Manifest::load(&scores)?;
            if images.len() != labels.len() {
                return Err(Error::Input(format!(
                    "{} images but {} scores",
                    images.len(),
                    labels.len()
                )));
            }
            let y = labels.scores(&cfg.target_eval_scale)?;
            let data = Dataset::unlabeled(&images, cfg.cache_images)?;
            let stages = if stages.is_empty() { cfg.analyze_stages.clone() } else { stages };
            let analysis = analyze_styles(
                &model,
                &data,
                &y,
                &domain,
                &stages,
                cfg.crop(),
                &cfg.normalization(),
                cfg.batch_size,
                &out,
            )?;
            let text = serde_json::to_string_pretty(&analysis).expect("serializable");
            let summary = out.join("summary.json");
            fs::write(&summary, format!("{text}\n")).map_err(|e| io_err(&summary, e))?;
            println!("{text}");
            Ok(())
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Checkpoint plus the training configuration stored in it (defaults for
/// its mode when none was stored).
fn load_checkpoint(path: &Path) -> styleam::Result<(Checkpoint, TrainingConfig)> {
    let ck = Checkpoint::load(path)?;
    let cfg = match &ck.manifest.config {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| Error::Checkpoint(format!("stored config: {e}")))?,
        None => TrainingConfig {
            mode: ck.manifest.mode,
            ..Default::default()
        },
    };
    Ok((ck, TrainingConfig::resolved(&cfg)))
}

fn write_dump(path: &Path, paths: &[PathBuf], preds: &[f64], labels: &[f64]) -> styleam::Result<()> {
    let mut text = String::from("path,prediction,score\n");
    for ((p, y_hat), y) in paths.iter().zip(preds).zip(labels) {
        text.push_str(&format!("{},{y_hat},{y}\n", p.display()));
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}
