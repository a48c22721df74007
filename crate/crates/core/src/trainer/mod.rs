//! Two-phase schedule: source pretraining with the configured mixup, then
//! adversarial adaptation with SROCC-gated relaxation.

mod config;
mod eval;
mod run;

pub use config::{AlignmentSpace, MixupMode, TrainingConfig};
pub use eval::{evaluate, predict_dataset, EvalOutput};
pub use run::{pretrain_source, run_training, run_uda, RunArtifacts, PRETRAIN_CHECKPOINT, UDA_CHECKPOINT};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::{
    quality_l2_var, relaxation_flag, relaxed_bce_var, total_loss_var, LossReport, RelaxationTracker,
};
use crate::autograd::{Graph, Var};
use crate::data::{paired_epoch, single_epoch, Batch, CropMode, Dataset, Normalization};
use crate::error::{config_err, input_err, Error, Result};
use crate::nn::{
    apply_bn_updates, grl_apply, Adam, AdamConfig, BnMode, Checkpoint, CheckpointMeta, Forward, GrlCoefficient, Model,
    Phase, RngState,
};
use crate::style::{mix_labels, sample_mix, sample_partners, StyleVars};

/// Stream of the seed reserved for discriminator initialization, so the
/// pretrain phase is independent of the alignment settings.
const DISC_INIT_STREAM: u64 = 1;

/// Draws `p ~ U[0, 1)` and opens when `p > 1 - prob`.
pub fn mixup_gate<R: Rng>(prob: f64, rng: &mut R) -> bool {
    let p: f64 = rng.random();
    prob >= 1.0 || p > 1.0 - prob
}

/// Partner indices and coefficients of one mixed step.
#[derive(Clone, Debug, PartialEq)]
pub struct MixPlan {
    pub partners: Vec<usize>,
    pub lambdas: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainingConfig,
    pub model: Model<f32>,
    adam: Adam<f32>,
    pub rng: ChaCha8Rng,
    tracker: RelaxationTracker,
    step: u64,
    pub phase: Phase,
    pub epoch: usize,
}

struct SourceSide<'g> {
    preds: Var<'g, f32>,
    labels: Vec<f64>,
    disc_input: Option<Var<'g, f32>>,
}

impl Trainer {
    /// Fresh model seeded from `config.seed`; full mode optionally imports
    /// backbone weights.
    pub fn new(config: &TrainingConfig) -> Result<Self> {
        config.validate()?;
        let config = config.resolved();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut model = Model::new(config.mode, None, &mut rng);
        if let Some(path) = &config.backbone_weights {
            let ck = Checkpoint::load(path)?;
            let n = ck.load_into(&mut model, "backbone.")?;
            if n == 0 {
                return Err(config_err!(
                    "backbone_weights {} holds no backbone.* tensors",
                    path.display()
                ));
            }
            log::info!("imported {n} backbone tensors from {}", path.display());
        }
        Ok(Self::assemble(config, model, rng))
    }

    /// Continues from a checkpoint, restoring its random stream when saved.
    pub fn from_checkpoint(config: &TrainingConfig, ck: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let config = config.resolved();
        if ck.manifest.mode != config.mode {
            return Err(config_err!(
                "mode is {:?} but the checkpoint holds a {:?} model",
                config.mode,
                ck.manifest.mode
            ));
        }
        let model = ck.to_model()?;
        let rng = match &ck.manifest.rng {
            Some(state) => state.restore()?,
            None => ChaCha8Rng::seed_from_u64(config.seed),
        };
        let mut t = Self::assemble(config, model, rng);
        t.phase = ck.manifest.phase;
        t.epoch = ck.manifest.epoch;
        Ok(t)
    }

    fn assemble(config: TrainingConfig, model: Model<f32>, rng: ChaCha8Rng) -> Self {
        let adam = Adam::new(AdamConfig {
            lr: config.lr(),
            weight_decay: config.weight_decay,
            ..Default::default()
        });
        let tracker = RelaxationTracker::new(config.tau, config.srocc_window);
        Self {
            config,
            model,
            adam,
            rng,
            tracker,
            step: 0,
            phase: Phase::Imported,
            epoch: 0,
        }
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn crop(&self) -> usize {
        self.config.crop.expect("resolved config")
    }

    fn norm(&self) -> Normalization {
        self.config.normalization.expect("resolved config")
    }

    /// Discriminator input width implied by `alignment_space`.
    pub fn discriminator_width(&self) -> Option<usize> {
        let c = self.model.backbone.final_width();
        match self.config.alignment_space {
            AlignmentSpace::Style => Some(2 * c),
            AlignmentSpace::Feature => Some(c),
            AlignmentSpace::None => None,
        }
    }

    /// Prepares the adaptation phase: fresh optimizer moments and, when an
    /// alignment space is configured, a discriminator of matching width.
    pub fn begin_uda(&mut self) -> Result<()> {
        self.adam = Adam::new(self.adam.config);
        self.step = 0;
        self.tracker = RelaxationTracker::new(self.config.tau, self.config.srocc_window);
        let Some(width) = self.discriminator_width() else {
            return Ok(());
        };
        match &self.model.disc {
            Some(d) if d.in_dim() == width => Ok(()),
            Some(d) => Err(config_err!(
                "alignment_space {:?} needs discriminator width {width}, checkpoint has {}",
                self.config.alignment_space,
                d.in_dim()
            )),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
                rng.set_stream(DISC_INIT_STREAM);
                self.model.attach_discriminator(width, &mut rng)
            }
        }
    }

    fn draw_mix(&mut self, batch: usize) -> Result<Option<MixPlan>> {
        if self.config.mixup_mode == MixupMode::None {
            return Ok(None);
        }
        if !mixup_gate(self.config.mixup_prob, &mut self.rng) {
            return Ok(None);
        }
        let draw = sample_mix(self.config.alpha, batch, self.config.lambda_mode, &mut self.rng)?;
        let partners = sample_partners(batch, &mut self.rng);
        Ok(Some(MixPlan {
            partners,
            lambdas: draw.lambdas,
        }))
    }

    /// Head predictions, loss labels and discriminator input for the source
    /// half of a batch.
    fn source_side<'g>(
        &self,
        f: &Forward<'g, '_, f32>,
        fs: Var<'g, f32>,
        plain_preds: Var<'g, f32>,
        labels: &[f64],
        plan: Option<&MixPlan>,
        align: bool,
    ) -> Result<SourceSide<'g>> {
        let space = self.config.alignment_space;
        let disc_of = |features: Var<'g, f32>, style: Option<StyleVars<'g, f32>>| -> Result<Option<Var<'g, f32>>> {
            if !align {
                return Ok(None);
            }
            Ok(Some(match space {
                AlignmentSpace::Style => match style {
                    Some(s) => s.concat()?,
                    None => StyleVars::of(features)?.concat()?,
                },
                AlignmentSpace::Feature => features.spatial_mean()?,
                AlignmentSpace::None => unreachable!("alignment disabled"),
            }))
        };
        let Some(plan) = plan else {
            return Ok(SourceSide {
                preds: plain_preds,
                labels: labels.to_vec(),
                disc_input: disc_of(fs, None)?,
            });
        };
        let mixed_labels = mix_labels(labels, &plan.partners, &plan.lambdas);
        match self.config.mixup_mode {
            MixupMode::StyleMixup | MixupMode::MixstyleNoLabel => {
                let mixed = StyleVars::of(fs)?.mix(&plan.partners, &plan.lambdas)?;
                let fmix = mixed.transfer(fs)?;
                let labels = if self.config.mixup_mode == MixupMode::StyleMixup {
                    mixed_labels
                } else {
                    labels.to_vec()
                };
                Ok(SourceSide {
                    preds: self.model.predict_quality(f, fmix)?,
                    labels,
                    disc_input: disc_of(fmix, Some(mixed))?,
                })
            }
            MixupMode::FeatureMixup => {
                let lambdas: Vec<f32> = plan.lambdas.iter().map(|&l| l as f32).collect();
                let fmix = fs.mix_rows(&plan.partners, &lambdas)?;
                Ok(SourceSide {
                    preds: self.model.predict_quality(f, fmix)?,
                    labels: mixed_labels,
                    disc_input: disc_of(fmix, None)?,
                })
            }
            MixupMode::None => unreachable!("no plan without mixup"),
        }
    }

    fn train_step(&mut self, source: &Batch, target: Option<&Batch>) -> Result<LossReport> {
        let labels = source
            .labels
            .clone()
            .ok_or_else(|| config_err!("source batch carries no labels"))?;
        let bs = source.images.shape()[0];
        let align = target.is_some();
        let plan = self.draw_mix(bs)?;
        let deepest = self.model.backbone.num_stages();

        let g = Graph::new();
        let f = Forward::new(&g, &self.model.store, BnMode::Train);
        let mut x = g.constant(source.images.clone());
        if let Some(t) = target {
            x = x.concat_rows(g.constant(t.images.clone()))?;
        }
        let feats = self.model.backbone.forward(&f, x, deepest)?;
        let fs = if align { feats.slice_rows(0, bs)? } else { feats };
        let plain_preds = self.model.predict_quality(&f, fs)?;
        let plain_values = plain_preds.value().to_f64_vec();
        let side = self.source_side(&f, fs, plain_preds, &labels, plan.as_ref(), align)?;
        let l_q = quality_l2_var(side.preds, &side.labels)?;

        let (relax, l_d) = match (target, side.disc_input) {
            (Some(t), Some(src_in)) => {
                let relax = self.tracker.update(&plain_values, &labels);
                let ft = feats.slice_rows(bs, t.images.shape()[0])?;
                let tgt_in = match self.config.alignment_space {
                    AlignmentSpace::Style => StyleVars::of(ft)?.concat()?,
                    _ => ft.spatial_mean()?,
                };
                let c = GrlCoefficient::default();
                let ds = self.model.discriminate(&f, grl_apply(src_in, c))?;
                let dt = self.model.discriminate(&f, grl_apply(tgt_in, c))?;
                (relax, Some(relaxed_bce_var(ds, dt, relax.h)?))
            }
            _ => (relaxation_flag(&plain_values, &labels, self.config.tau), None),
        };
        let lambda = if l_d.is_some() { self.config.lambda_adv } else { 0.0 };
        let total = total_loss_var(l_q, l_d, lambda)?;
        let report = LossReport {
            step: self.step,
            l_q: l_q.value().data()[0] as f64,
            l_d: l_d.map_or(0.0, |d| d.value().data()[0] as f64),
            l_all: total.value().data()[0] as f64,
            h: relax.h,
            batch_srocc: relax.batch_srocc,
            mixed: plan.is_some(),
        };
        if !report.l_all.is_finite() {
            return Err(Error::Training(format!("non-finite loss at step {}", self.step)));
        }
        let grads = g.backward(total)?;
        let updates = f.take_updates();
        drop(f);
        self.adam.step(&mut self.model.store, &grads);
        apply_bn_updates(&mut self.model.store, &updates);
        self.step += 1;
        Ok(report)
    }

    /// One source-only step minimizing the quality loss.
    pub fn pretrain_step(&mut self, source: &Batch) -> Result<LossReport> {
        self.train_step(source, None)
    }

    /// One adaptation step. With `alignment_space = none` the target batch
    /// is ignored and only the quality loss is trained.
    pub fn uda_step(&mut self, source: &Batch, target: &Batch) -> Result<LossReport> {
        if self.config.alignment_space == AlignmentSpace::None {
            return self.train_step(source, None);
        }
        if self.model.disc.is_none() {
            return Err(config_err!("call begin_uda before adaptation steps"));
        }
        self.train_step(source, Some(target))
    }

    pub fn pretrain_epoch(&mut self, source: &Dataset) -> Result<Vec<LossReport>> {
        let (crop, norm) = (self.crop(), self.norm());
        let mut reports = Vec::new();
        for idx in single_epoch(source.len(), self.config.batch_size, &mut self.rng) {
            let batch = source.batch(&idx, CropMode::Train, crop, &norm, &mut self.rng)?;
            reports.push(self.pretrain_step(&batch)?);
        }
        self.epoch += 1;
        Ok(reports)
    }

    pub fn uda_epoch(&mut self, source: &Dataset, target: &Dataset) -> Result<Vec<LossReport>> {
        if target.labels().is_some() {
            return Err(input_err!("target data passed to adaptation must be unlabeled"));
        }
        let (crop, norm) = (self.crop(), self.norm());
        let align = self.config.alignment_space != AlignmentSpace::None;
        let mut reports = Vec::new();
        for (si, ti) in paired_epoch(source.len(), target.len(), self.config.batch_size, &mut self.rng)? {
            let sb = source.batch(&si, CropMode::Train, crop, &norm, &mut self.rng)?;
            let report = if align {
                let tb = target.batch(&ti, CropMode::Train, crop, &norm, &mut self.rng)?;
                self.uda_step(&sb, &tb)?
            } else {
                self.train_step(&sb, None)?
            };
            reports.push(report);
        }
        self.epoch += 1;
        Ok(reports)
    }

    /// Snapshot of the model, optimizer state and random stream.
    pub fn checkpoint(&self, phase: Phase) -> Checkpoint {
        Checkpoint::from_model(
            &self.model,
            Some(&self.adam),
            CheckpointMeta {
                phase,
                epoch: self.epoch,
                config_digest: self.config.digest(),
                config: Some(self.config.to_json()),
                rng: Some(RngState::capture(&self.rng)),
            },
        )
    }
}
