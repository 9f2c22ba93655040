//! Temporal Gaussian mixture (TGM) convolution layers for per-frame
//! multi-label activity detection over continuous feature sequences.
//!
//! The math is generic over [`Scalar`] (`f32` or `f64`). Correctness
//! contracts such as the finite-difference checks are stated for `f64`;
//! the `*64` aliases below are what the CLI and the acceptance suite use.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod kernel;
pub mod layers;
pub mod model;
pub mod param;
pub mod scalar;
pub mod train;

pub use error::{Result, TgmError};
pub use param::{ParamTensor, Parameterized};
pub use scalar::Scalar;

pub type FeatureSequence64 = data::FeatureSequence<f64>;
pub type FeatureSequence32 = data::FeatureSequence<f32>;
pub type Sample64 = data::Sample<f64>;
pub type KernelBank64 = kernel::KernelBank<f64>;
pub type KernelBank32 = kernel::KernelBank<f32>;
pub type Layer64 = layers::Layer<f64>;
pub type Layer32 = layers::Layer<f32>;
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
pub type AdamState64 = train::AdamState<f64>;
