use rand::Rng;

use super::backbone::{Backbone, BackboneMode};
use super::heads::{Discriminator, RegressionHead};
use super::layers::{BnMode, Forward};
use super::params::ParamStore;
use crate::autograd::{Graph, Var};
use crate::error::{config_err, Result};
use crate::tensor::{Float, Tensor};

/// Backbone, quality head and (optionally) a domain discriminator sharing one
/// parameter store.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub head: RegressionHead,
    pub disc: Option<Discriminator>,
}

impl<T: Float> Model<T> {
    /// `disc_in` is the discriminator input width, or `None` when no domain
    /// alignment is trained.
    pub fn new<R: Rng>(mode: BackboneMode, disc_in: Option<usize>, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, mode, rng);
        let head = RegressionHead::new(&mut store, backbone.final_width(), rng);
        let disc = disc_in.map(|d| Discriminator::new(&mut store, d, rng));
        Self {
            store,
            backbone,
            head,
            disc,
        }
    }

    /// Adds a freshly initialized discriminator, replacing none. Fails when
    /// one is already attached.
    pub fn attach_discriminator<R: Rng>(&mut self, in_dim: usize, rng: &mut R) -> Result<()> {
        if let Some(d) = &self.disc {
            return Err(config_err!("model already has a discriminator of width {}", d.in_dim()));
        }
        self.disc = Some(Discriminator::new(&mut self.store, in_dim, rng));
        Ok(())
    }

    pub fn mode(&self) -> BackboneMode {
        self.backbone.mode()
    }

    /// Same architecture with converted element type.
    pub fn cast<U: Float>(&self) -> Model<U> {
        Model {
            store: self.store.cast(),
            backbone: self.backbone.clone(),
            head: self.head.clone(),
            disc: self.disc.clone(),
        }
    }

    /// Final-stage features to scores in `[0, 5]` via global average pooling
    /// and the quality head.
    pub fn predict_quality<'g>(
        &self,
        f: &Forward<'g, '_, T>,
        features: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let shape = features.shape();
        if shape.len() != 4 || shape[1] != self.head.in_dim() {
            return Err(config_err!(
                "quality head expects {} channels, got feature map {:?}",
                self.head.in_dim(),
                shape
            ));
        }
        self.head.forward(f, features.spatial_mean()?)
    }

    /// Discriminator probabilities for `(B, width)` inputs.
    pub fn discriminate<'g>(&self, f: &Forward<'g, '_, T>, input: Var<'g, T>) -> Result<Var<'g, T>> {
        let disc = self
            .disc
            .as_ref()
            .ok_or_else(|| config_err!("model was built without a discriminator"))?;
        disc.forward(f, input)
    }

    /// Scores for a batch of images in evaluation mode.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<f64>> {
        let g = Graph::new();
        let f = Forward::new(&g, &self.store, BnMode::Eval);
        let x = g.constant(images.clone());
        let feats = self.backbone.forward(&f, x, self.backbone.num_stages())?;
        Ok(self.predict_quality(&f, feats)?.value().to_f64_vec())
    }
}
