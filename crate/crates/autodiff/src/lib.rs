//! Reverse-mode differentiation for small convolutional recurrent models.
//!
//! Values live on a [`Tape`] as row-major NHWC buffers. Every primitive
//! records enough to replay its vector-Jacobian product, and
//! [`Tape::backward`] accumulates gradients into leaves created with
//! `requires_grad`. Training runs in `f32`; [`gradcheck`] runs in `f64`.

pub mod adam;
mod conv;
mod depthwise;
mod error;
pub mod gradcheck;
mod lstm;
pub mod par;
mod params;
mod real;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState, Moments, NonFinitePolicy, StepOutcome};
pub use conv::Padding;
pub use error::{AutodiffError, Result};
pub use lstm::{conv_lstm_cell, ConvLstmParams};
pub use par::Exec;
pub use params::{Bound, GradSet, ParamSet};
pub use real::Real;
pub use tape::{BackwardReport, Tape, Var};
pub use tensor::{numel, Tensor};
