//! Parameterized building blocks.

use std::cell::RefCell;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::params::{ParamId, ParamKind, ParamStore};
use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::tensor::{Float, Tensor};

/// Which statistics batch normalization uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running averages are updated after the step.
    Train,
    /// Running statistics.
    Eval,
}

/// Running-statistics update produced by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    layer: BatchNorm2d,
    mean: Vec<T>,
    var: Vec<T>,
    count: usize,
}

/// Everything a forward pass needs: the tape, the parameters it reads and
/// the normalization mode.
pub struct Forward<'g, 's, T: Float> {
    pub graph: &'g Graph<T>,
    pub store: &'s ParamStore<T>,
    pub mode: BnMode,
    updates: RefCell<Vec<BnUpdate<T>>>,
}

impl<'g, 's, T: Float> Forward<'g, 's, T> {
    pub fn new(graph: &'g Graph<T>, store: &'s ParamStore<T>, mode: BnMode) -> Self {
        Self {
            graph,
            store,
            mode,
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn param(&self, id: ParamId) -> Var<'g, T> {
        self.store.bind(self.graph, id)
    }

    /// Pending running-statistics updates, in layer order.
    pub fn take_updates(&self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.updates.borrow_mut())
    }
}

/// Applies running-statistics updates to `store` (momentum form, unbiased
/// batch variance).
pub fn apply_bn_updates<T: Float>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>]) {
    for u in updates {
        let m = T::cst(u.layer.momentum);
        let unbias = if u.count > 1 {
            T::cst(u.count as f64 / (u.count - 1) as f64)
        } else {
            T::one()
        };
        for (r, &b) in store.get_mut(u.layer.running_mean).data_mut().iter_mut().zip(&u.mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        for (r, &b) in store.get_mut(u.layer.running_var).data_mut().iter_mut().zip(&u.var) {
            *r = (T::one() - m) * *r + m * b * unbias;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-normal initialized convolution without bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let n = out_ch * in_ch * kernel * kernel;
        let data = (0..n).map(|_| T::cst(normal.sample(rng))).collect();
        let w = Tensor::new(&[out_ch, in_ch, kernel, kernel], data).expect("conv weight");
        Self {
            weight: store.add(format!("{name}.weight"), w, ParamKind::Trainable),
            stride,
            pad,
        }
    }

    pub fn forward<'g, T: Float>(&self, f: &Forward<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.conv2d(f.param(self.weight), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(
                format!("{name}.weight"),
                Tensor::full(&[channels], T::one()),
                ParamKind::Trainable,
            ),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[channels]), ParamKind::Trainable),
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                ParamKind::Buffer,
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::full(&[channels], T::one()),
                ParamKind::Buffer,
            ),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward<'g, T: Float>(&self, f: &Forward<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let (gamma, beta) = (f.param(self.gamma), f.param(self.beta));
        match f.mode {
            BnMode::Train => {
                let shape = x.shape();
                let (y, mean, var) = x.batch_norm(gamma, beta, T::cst(self.eps))?;
                f.updates.borrow_mut().push(BnUpdate {
                    layer: self.clone(),
                    mean,
                    var,
                    count: shape[0] * shape[2] * shape[3],
                });
                Ok(y)
            }
            BnMode::Eval => x.channel_affine(
                gamma,
                beta,
                f.store.get(self.running_mean).data(),
                f.store.get(self.running_var).data(),
                T::cst(self.eps),
            ),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform `(-1/sqrt(in), 1/sqrt(in))` initialization for weight and bias.
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let uniform = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let w = (0..in_dim * out_dim).map(|_| T::cst(uniform.sample(rng))).collect();
        let b = (0..out_dim).map(|_| T::cst(uniform.sample(rng))).collect();
        Self {
            weight: store.add(
                format!("{name}.weight"),
                Tensor::new(&[out_dim, in_dim], w).expect("linear weight"),
                ParamKind::Trainable,
            ),
            bias: store.add(
                format!("{name}.bias"),
                Tensor::new(&[out_dim], b).expect("linear bias"),
                ParamKind::Trainable,
            ),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'g, T: Float>(&self, f: &Forward<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.linear(f.param(self.weight), f.param(self.bias))
    }

    /// Sets weight and bias to zero.
    pub fn zero<T: Float>(&self, store: &mut ParamStore<T>) {
        store.get_mut(self.weight).data_mut().fill(T::zero());
        store.get_mut(self.bias).data_mut().fill(T::zero());
    }
}
