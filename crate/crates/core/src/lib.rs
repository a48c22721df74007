pub mod alignment;
pub mod analysis;
pub mod autograd;
pub mod data;
pub mod error;
mod kernels;
pub mod metrics;
pub mod nn;
pub mod style;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
