use std::fs;
use std::path::{Path, PathBuf};

use super::eval::evaluate;
use super::{AlignmentSpace, Trainer, TrainingConfig};
use crate::alignment::LossReport;
use crate::data::{Dataset, Manifest};
use crate::error::{config_err, Error, Result};
use crate::metrics::MetricsReport;
use crate::nn::{Checkpoint, Phase};

pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt";
pub const UDA_CHECKPOINT: &str = "final.ckpt";
pub const METRICS_FILE: &str = "metrics.json";
pub const TELEMETRY_FILE: &str = "telemetry.jsonl";
pub const PRETRAIN_TELEMETRY_FILE: &str = "pretrain_telemetry.jsonl";
pub const CONFIG_FILE: &str = "config.json";

/// Files and results of one training run.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub output_dir: PathBuf,
    /// `None` when training resumed from an existing pretrain checkpoint.
    pub pretrain_checkpoint: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub telemetry: PathBuf,
    pub metrics: Option<MetricsReport>,
    pub metrics_path: Option<PathBuf>,
    pub pretrain_reports: Vec<LossReport>,
    pub uda_reports: Vec<LossReport>,
}

fn load_source(config: &TrainingConfig) -> Result<Dataset> {
    let path = config
        .source_manifest
        .as_ref()
        .ok_or_else(|| config_err!("source_manifest is required"))?;
    let manifest = Manifest::load(path)?;
    if !manifest.is_labeled() {
        return Err(config_err!(
            "source_manifest {} must give a score for every image",
            path.display()
        ));
    }
    Dataset::labeled(&manifest, &config.source_scale, config.cache_images)
}

fn load_target(config: &TrainingConfig) -> Result<Option<Dataset>> {
    match &config.target_manifest {
        Some(p) => Ok(Some(Dataset::unlabeled(&Manifest::load(p)?, config.cache_images)?)),
        None if config.alignment_space != AlignmentSpace::None => {
            Err(config_err!("target_manifest is required when alignment_space is not none"))
        }
        None => Ok(None),
    }
}

fn summarize(phase: &str, epoch: usize, reports: &[LossReport]) {
    let n = reports.len().max(1) as f64;
    let mean = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    log::info!(
        "{phase} epoch {epoch}: l_q {:.4} l_d {:.4} relaxed {:.2} mixed {:.2}",
        mean(|r| r.l_q),
        mean(|r| r.l_d),
        mean(|r| f64::from(r.h)),
        mean(|r| f64::from(u8::from(r.mixed)))
    );
}

fn write_jsonl(path: &Path, reports: &[LossReport]) -> Result<()> {
    let text: String = reports.iter().map(LossReport::to_json_line).collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Source-only phase: `pretrain_epochs` epochs of the quality loss under the
/// configured mixup.
pub fn pretrain_source(config: &TrainingConfig) -> Result<(Trainer, Vec<LossReport>)> {
    let source = load_source(config)?;
    let mut trainer = Trainer::new(config)?;
    let mut reports = Vec::new();
    for e in 0..config.pretrain_epochs {
        let r = trainer.pretrain_epoch(&source)?;
        summarize("pretrain", e + 1, &r);
        reports.extend(r);
    }
    trainer.phase = Phase::Pretrain;
    Ok((trainer, reports))
}

/// Adaptation phase on a pretrained trainer. Returns the step telemetry.
pub fn run_uda(trainer: &mut Trainer, source: &Dataset, target: Option<&Dataset>) -> Result<Vec<LossReport>> {
    trainer.begin_uda()?;
    let epochs = trainer.config().uda_epochs();
    // without a target domain the epoch length falls back to the source
    let target = target.unwrap_or(source);
    let unlabeled;
    let target = if target.labels().is_some() {
        unlabeled = target.without_labels();
        &unlabeled
    } else {
        target
    };
    let mut reports = Vec::new();
    for e in 0..epochs {
        let r = trainer.uda_epoch(source, target)?;
        summarize("uda", e + 1, &r);
        reports.extend(r);
    }
    trainer.phase = Phase::Uda;
    Ok(reports)
}

/// Full run: pretraining (or resuming from a pretrain checkpoint),
/// adaptation, checkpoints, telemetry and target evaluation, all under
/// `config.output_dir`.
pub fn run_training(config: &TrainingConfig, resume: Option<&Path>) -> Result<RunArtifacts> {
    config.validate()?;
    let config = config.resolved();
    let out = config.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_json(&out.join(CONFIG_FILE), &config)?;

    let source = load_source(&config)?;
    let target = load_target(&config)?;

    let (mut trainer, pretrain_reports, pretrain_checkpoint) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.manifest.phase != Phase::Pretrain {
                return Err(config_err!(
                    "--resume expects a pretrain checkpoint, {} has phase {:?}",
                    path.display(),
                    ck.manifest.phase
                ));
            }
            log::info!("resuming from {}; skipping pretraining", path.display());
            (Trainer::from_checkpoint(&config, &ck)?, Vec::new(), None)
        }
        None => {
            let (trainer, reports) = pretrain_source(&config)?;
            let path = out.join(PRETRAIN_CHECKPOINT);
            trainer.checkpoint(Phase::Pretrain).save(&path)?;
            write_jsonl(&out.join(PRETRAIN_TELEMETRY_FILE), &reports)?;
            (trainer, reports, Some(path))
        }
    };

    let uda_reports = run_uda(&mut trainer, &source, target.as_ref())?;
    let checkpoint = out.join(UDA_CHECKPOINT);
    trainer.checkpoint(Phase::Uda).save(&checkpoint)?;
    let telemetry = out.join(TELEMETRY_FILE);
    write_jsonl(&telemetry, &uda_reports)?;

    let (metrics, metrics_path) = match evaluate_target(&trainer, &config)? {
        Some(report) => {
            let p = out.join(METRICS_FILE);
            write_json(&p, &report)?;
            log::info!(
                "target SROCC {:.4} PLCC {:.4} (n = {})",
                report.srocc,
                report.plcc_mapped,
                report.n
            );
            (Some(report), Some(p))
        }
        None => (None, None),
    };

    Ok(RunArtifacts {
        output_dir: out,
        pretrain_checkpoint,
        checkpoint,
        telemetry,
        metrics,
        metrics_path,
        pretrain_reports,
        uda_reports,
    })
}

fn evaluate_target(trainer: &Trainer, config: &TrainingConfig) -> Result<Option<MetricsReport>> {
    let Some(scores_path) = &config.target_eval_scores else {
        log::warn!("no target_eval_scores configured; skipping evaluation");
        return Ok(None);
    };
    if !scores_path.is_file() {
        log::warn!("target eval file {} not found; skipping evaluation", scores_path.display());
        return Ok(None);
    }
    let scores = Manifest::load(scores_path)?;
    let images = match &config.target_manifest {
        Some(p) => Manifest::load(p)?,
        None => scores.clone(),
    };
    let out = evaluate(
        &trainer.model,
        &images,
        &scores,
        &config.target_eval_scale,
        config.crop(),
        &config.normalization(),
        config.batch_size,
    )?;
    Ok(Some(out.report))
}
