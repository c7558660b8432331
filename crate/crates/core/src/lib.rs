//! Stochastic variational video prediction on a moving-shapes benchmark.
//!
//! A conv-LSTM generator predicts motion kernels and compositing masks for
//! the next frame, conditioned on an 8×8 latent map. During training the
//! latent comes from an inference network that sees the whole video; at test
//! time it is drawn from a standard normal prior, and quality is measured
//! with best-of-N sampling.

pub mod checkpoint;
pub mod config;
pub mod dataset;
mod error;
pub mod eval;
pub mod generator;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod netcheck;
pub mod ppm;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use sv2p_autodiff as autodiff;
