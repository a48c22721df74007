use super::params::{ParamKind, ParamStore};
use crate::autograd::Gradients;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamSlot<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

/// Adam with coupled weight decay. Parameters without a gradient in a step
/// are left untouched and keep their moment estimates.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    slots: Vec<Option<AdamSlot<T>>>,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            slots: Vec::new(),
        }
    }

    pub fn slots(&self) -> &[Option<AdamSlot<T>>] {
        &self.slots
    }

    pub fn set_slot(&mut self, index: usize, slot: AdamSlot<T>) {
        if self.slots.len() <= index {
            self.slots.resize_with(index + 1, || None);
        }
        self.slots[index] = Some(slot);
    }

    /// One update of every trainable parameter that received a gradient.
    /// Returns how many tensors were updated.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> usize {
        let c = self.config;
        if self.slots.len() < store.len() {
            self.slots.resize_with(store.len(), || None);
        }
        let (b1, b2) = (T::cst(c.beta1), T::cst(c.beta2));
        let mut updated = 0;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.entry(id).kind != ParamKind::Trainable {
                continue;
            }
            let Some(grad) = grads.param(id.index()) else {
                continue;
            };
            let param = store.get_mut(id);
            let slot = self.slots[id.index()].get_or_insert_with(|| AdamSlot {
                m: Tensor::zeros(param.shape()),
                v: Tensor::zeros(param.shape()),
                step: 0,
            });
            slot.step += 1;
            let t = slot.step as i32;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let step_size = T::cst(c.lr / bc1);
            let bc2_sqrt = T::cst(bc2.sqrt());
            let (eps, wd) = (T::cst(c.eps), T::cst(c.weight_decay));
            for (((p, &g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(slot.m.data_mut())
                .zip(slot.v.data_mut())
            {
                let g = g + wd * *p;
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= step_size * *m / (v.sqrt() / bc2_sqrt + eps);
            }
            updated += 1;
        }
        updated
    }
}
