use crate::autograd::Var;
use crate::error::{config_err, Result};
use crate::tensor::Float;

/// Gradient-reversal scale `c >= 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrlCoefficient(f64);

impl GrlCoefficient {
    pub fn new(c: f64) -> Result<Self> {
        if !(c >= 0.0 && c.is_finite()) {
            return Err(config_err!("gradient reversal coefficient must be >= 0, got {c}"));
        }
        Ok(Self(c))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for GrlCoefficient {
    fn default() -> Self {
        Self(1.0)
    }
}

/// Identity on the forward pass; multiplies the incoming gradient by `-c`.
pub fn grl_apply<'g, T: Float>(x: Var<'g, T>, c: GrlCoefficient) -> Var<'g, T> {
    x.grl(T::cst(c.0))
}
