//! Memory-augmented deep generative models.
//!
//! A variational autoencoder whose generative network carries an external
//! memory per deterministic layer, read by soft attention and merged into the
//! top-down signal. Training maximizes the variational or importance-weighted
//! bound with a local reconstruction penalty; evaluation covers
//! importance-sampled likelihoods, missing-value imputation, a linear probe
//! and memory-slot analysis.

pub mod analysis;
pub mod autodiff;
pub mod error;
pub mod evaluation;
pub mod layers;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod model;
pub mod training;

pub use error::{Error, Result};
