//! Surrogate modelling of hyperelastic structures: dataset generation from
//! the FEM solver, U-Net models in deterministic, maximum-likelihood and
//! variational Bayes flavours, their training, Monte Carlo prediction and
//! validation metrics.

pub mod dataset;
mod error;
pub mod inference;
pub mod metrics;
pub mod problem;
mod rng;
pub mod training;
pub mod unet;

pub use error::CoreError;
pub use rng::substream;

pub type Result<T> = std::result::Result<T, CoreError>;
