//! Adversarial diffusion bridge purification at desk scale.

pub mod attacks;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
