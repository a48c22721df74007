//! Differentiable model components: backbone with per-stage taps, quality
//! head, domain discriminator, gradient reversal, optimizer and checkpoints.

pub mod backbone;
pub mod checkpoint;
pub mod grl;
pub mod heads;
pub mod layers;
pub mod model;
pub mod optim;
pub mod params;

pub use backbone::{Backbone, BackboneMode};
pub use checkpoint::{Checkpoint, CheckpointMeta, Phase, RngState};
pub use grl::{grl_apply, GrlCoefficient};
pub use heads::{Discriminator, RegressionHead, MAX_SCORE};
pub use layers::{apply_bn_updates, BnMode, Forward};
pub use model::Model;
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamKind, ParamStore};
