use rand::Rng;

use super::layers::{Forward, Linear};
use super::params::ParamStore;
use crate::autograd::Var;
use crate::error::{config_err, Result};
use crate::tensor::Float;

/// Upper end of the quality scale.
pub const MAX_SCORE: f64 = 5.0;

/// `in -> in/2 -> 1` regressor with a rectifier between the affine layers and
/// a sigmoid scaled to `[0, 5]` on top.
#[derive(Clone, Debug)]
pub struct RegressionHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl RegressionHead {
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, in_dim: usize, rng: &mut R) -> Self {
        let hidden = (in_dim / 2).max(1);
        Self {
            fc1: Linear::new(store, "head.fc1", in_dim, hidden, rng),
            fc2: Linear::new(store, "head.fc2", hidden, 1, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.fc1.in_dim
    }

    /// `(B, in)` pooled features to `(B,)` scores.
    pub fn forward<'g, T: Float>(&self, f: &Forward<'g, '_, T>, pooled: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = pooled.shape();
        if shape.len() != 2 || shape[1] != self.in_dim() {
            return Err(config_err!(
                "quality head takes width {}, got features of shape {:?}",
                self.in_dim(),
                shape
            ));
        }
        let h = self.fc1.forward(f, pooled)?.relu();
        let z = self.fc2.forward(f, h)?;
        z.sigmoid().scale(T::cst(MAX_SCORE)).reshape(&[shape[0]])
    }
}

/// Domain classifier `in -> in/2 -> in/4 -> 1` with rectifiers after the
/// first two affine layers and a sigmoid at the end.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
}

impl Discriminator {
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, in_dim: usize, rng: &mut R) -> Self {
        let h1 = (in_dim / 2).max(1);
        let h2 = (in_dim / 4).max(1);
        Self {
            fc1: Linear::new(store, "disc.fc1", in_dim, h1, rng),
            fc2: Linear::new(store, "disc.fc2", h1, h2, rng),
            fc3: Linear::new(store, "disc.fc3", h2, 1, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.fc1.in_dim
    }

    /// `(B, in)` inputs to `(B,)` probabilities of the target domain.
    pub fn forward<'g, T: Float>(&self, f: &Forward<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.in_dim() {
            return Err(config_err!(
                "discriminator takes width {}, got input of shape {:?}",
                self.in_dim(),
                shape
            ));
        }
        let h = self.fc1.forward(f, x)?.relu();
        let h = self.fc2.forward(f, h)?.relu();
        self.fc3.forward(f, h)?.sigmoid().reshape(&[shape[0]])
    }
}
