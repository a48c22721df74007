use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::SroccWindow;
use crate::data::{Normalization, ScoreScale};
use crate::error::{config_err, Error, Result};
use crate::nn::BackboneMode;
use crate::style::LambdaMode;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixupMode {
    /// Mix feature styles and labels.
    #[default]
    StyleMixup,
    /// Mix whole feature maps and labels.
    FeatureMixup,
    /// Mix feature styles, keep the original labels.
    MixstyleNoLabel,
    None,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentSpace {
    /// Discriminator on concatenated channel means and stds (`2C`).
    #[default]
    Style,
    /// Discriminator on globally pooled features (`C`).
    Feature,
    None,
}

/// All hyperparameters of a training run. Fields left as `None` take the
/// mode-dependent defaults listed in [`TrainingConfig::resolved`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub mode: BackboneMode,
    pub alpha: f64,
    pub tau: f64,
    pub lambda_adv: f64,
    pub mixup_prob: f64,
    pub lr: Option<f64>,
    pub weight_decay: f64,
    pub pretrain_epochs: usize,
    pub uda_epochs: Option<usize>,
    pub batch_size: usize,
    pub crop: Option<usize>,
    pub seed: u64,
    pub mixup_mode: MixupMode,
    pub alignment_space: AlignmentSpace,
    pub lambda_mode: LambdaMode,
    pub srocc_window: SroccWindow,
    pub source_manifest: Option<PathBuf>,
    pub source_scale: ScoreScale,
    pub target_manifest: Option<PathBuf>,
    /// Eval-only target labels, read after training.
    pub target_eval_scores: Option<PathBuf>,
    pub target_eval_scale: ScoreScale,
    pub normalization: Option<Normalization>,
    /// Checkpoint-format file whose `backbone.*` tensors initialize the
    /// backbone.
    pub backbone_weights: Option<PathBuf>,
    pub cache_images: bool,
    pub output_dir: PathBuf,
    /// 1-based stages exported by `analyze-styles`; empty means all.
    pub analyze_stages: Vec<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            mode: BackboneMode::Toy,
            alpha: 0.65,
            tau: 0.9,
            lambda_adv: 2.0,
            mixup_prob: 0.5,
            lr: None,
            weight_decay: 5e-4,
            pretrain_epochs: 5,
            uda_epochs: None,
            batch_size: 16,
            crop: None,
            seed: 0,
            mixup_mode: MixupMode::StyleMixup,
            alignment_space: AlignmentSpace::Style,
            lambda_mode: LambdaMode::PerSample,
            srocc_window: SroccWindow::Batch,
            source_manifest: None,
            source_scale: ScoreScale::default(),
            target_manifest: None,
            target_eval_scores: None,
            target_eval_scale: ScoreScale::default(),
            normalization: None,
            backbone_weights: None,
            cache_images: true,
            output_dir: PathBuf::from("output"),
            analyze_stages: Vec::new(),
        }
    }
}

fn check(ok: bool, key: &str, constraint: &str, value: impl std::fmt::Display) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(config_err!("{key} must be {constraint}, got {value}"))
    }
}

impl TrainingConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| config_err!("{e}"))
    }

    /// Reads a JSON config; relative paths are resolved against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => config_err!("{}: {m}", path.display()),
            other => other,
        })?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.source_manifest,
            &mut self.target_manifest,
            &mut self.target_eval_scores,
            &mut self.backbone_weights,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    /// Copy with every mode-dependent default filled in: toy mode uses lr
    /// 1e-3, 30 adaptation epochs, crop 64 and `(x - 0.5) / 0.5`
    /// normalization; full mode uses lr 1e-4, 50 epochs, crop 384 and
    /// ImageNet normalization.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let toy = self.mode == BackboneMode::Toy;
        c.lr.get_or_insert(if toy { 1e-3 } else { 1e-4 });
        c.uda_epochs.get_or_insert(if toy { 30 } else { 50 });
        c.crop.get_or_insert(if toy { 64 } else { 384 });
        c.normalization.get_or_insert(if toy { Normalization::TOY } else { Normalization::IMAGENET });
        c
    }

    pub fn lr(&self) -> f64 {
        self.resolved().lr.expect("resolved")
    }

    pub fn uda_epochs(&self) -> usize {
        self.resolved().uda_epochs.expect("resolved")
    }

    pub fn crop(&self) -> usize {
        self.resolved().crop.expect("resolved")
    }

    pub fn normalization(&self) -> Normalization {
        self.resolved().normalization.expect("resolved")
    }

    /// Checks every constraint; the error names the offending key.
    pub fn validate(&self) -> Result<()> {
        check(self.alpha > 0.0 && self.alpha.is_finite(), "alpha", "a finite value > 0", self.alpha)?;
        check((-1.0..=1.0).contains(&self.tau), "tau", "in [-1, 1]", self.tau)?;
        check(
            self.lambda_adv >= 0.0 && self.lambda_adv.is_finite(),
            "lambda_adv",
            "a finite value >= 0",
            self.lambda_adv,
        )?;
        check((0.0..=1.0).contains(&self.mixup_prob), "mixup_prob", "in [0, 1]", self.mixup_prob)?;
        let lr = self.lr();
        check(lr > 0.0 && lr.is_finite(), "lr", "a finite value > 0", lr)?;
        check(
            self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
            "weight_decay",
            "a finite value >= 0",
            self.weight_decay,
        )?;
        check(self.batch_size >= 2, "batch_size", ">= 2", self.batch_size)?;
        let stages = self.mode.stage_widths().len();
        let multiple = 1usize << stages;
        let crop = self.crop();
        check(
            crop >= multiple && crop % multiple == 0,
            "crop",
            &format!("a positive multiple of {multiple}"),
            crop,
        )?;
        for (key, scale) in [("source_scale", &self.source_scale), ("target_eval_scale", &self.target_eval_scale)] {
            let (lo, hi) = scale.raw_range;
            check(
                lo.is_finite() && hi.is_finite() && lo < hi,
                &format!("{key}.raw_range"),
                "(lo, hi) with lo < hi",
                format!("({lo}, {hi})"),
            )?;
        }
        if let Some(n) = &self.normalization {
            check(
                n.std.iter().all(|&s| s > 0.0 && s.is_finite()),
                "normalization.std",
                "positive",
                format!("{:?}", n.std),
            )?;
        }
        for &s in &self.analyze_stages {
            check(
                (1..=stages).contains(&s),
                "analyze_stages",
                &format!("stage numbers in 1..={stages}"),
                s,
            )?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 of the resolved configuration's JSON encoding.
    pub fn digest(&self) -> String {
        let text = serde_json::to_string(&self.resolved()).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn stage_count(&self) -> usize {
        self.mode.stage_widths().len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_per_mode() {
        let toy = TrainingConfig::default().resolved();
        assert_eq!((toy.uda_epochs, toy.crop), (Some(30), Some(64)));
        assert_eq!(toy.normalization, Some(Normalization::TOY));
        let full = TrainingConfig {
            mode: BackboneMode::Full,
            ..Default::default()
        }
        .resolved();
        assert_eq!((full.uda_epochs, full.crop), (Some(50), Some(384)));
        TrainingConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = TrainingConfig::from_json(r#"{"alpah": 0.5}"#).unwrap_err();
        assert!(err.to_string().contains("alpah"), "{err}");
        let cfg = TrainingConfig::from_json(r#"{"alpha": 0.5, "mixup_mode": "feature_mixup"}"#).unwrap();
        assert_eq!((cfg.alpha, cfg.mixup_mode), (0.5, MixupMode::FeatureMixup));
    }

    #[test]
    fn validation_names_the_key() {
        let cases: [(&str, TrainingConfig); 5] = [
            ("mixup_prob", TrainingConfig { mixup_prob: 1.5, ..Default::default() }),
            ("lambda_adv", TrainingConfig { lambda_adv: -1.0, ..Default::default() }),
            ("tau", TrainingConfig { tau: 1.2, ..Default::default() }),
            ("alpha", TrainingConfig { alpha: 0.0, ..Default::default() }),
            ("crop", TrainingConfig { crop: Some(40), ..Default::default() }),
        ];
        for (key, cfg) in cases {
            let msg = cfg.validate().unwrap_err().to_string();
            assert!(msg.contains(key), "{msg}");
        }
    }

    #[test]
    fn digest_tracks_content() {
        let a = TrainingConfig::default();
        let b = TrainingConfig { seed: 1, ..Default::default() };
        assert_eq!(a.digest(), a.clone().digest());
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
        assert_eq!(a.digest(), a.resolved().digest());
    }

    #[test]
    fn relative_paths_follow_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"source_manifest": "data/source.csv", "output_dir": "run"}"#).unwrap();
        let cfg = TrainingConfig::load(&p).unwrap();
        assert_eq!(cfg.source_manifest, Some(dir.path().join("data/source.csv")));
        assert_eq!(cfg.output_dir, dir.path().join("run"));
    }
}
