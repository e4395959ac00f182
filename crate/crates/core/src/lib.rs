//! Separability-controlling consistency losses for split networks, white-box
//! model inversion attacks, and a constructive reduction from 3-SAT to
//! two-layer ReLU network inversion.

pub mod data;
pub mod error;
pub mod experiments;
pub mod hardness;
pub mod invert;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use tensor::Tensor;
