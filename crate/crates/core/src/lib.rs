//! No-reference perceptual quality assessment for 3D Gaussian Splatting.
//!
//! The crate covers the whole offline pipeline: PLY I/O for native Gaussian
//! primitives, synthetic distortions, region preprocessing, the graph-attention
//! quality network with hand-written gradients, correlation losses and the
//! training/benchmark loop, evaluation metrics and subjective-score processing.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! name the common instantiations.

pub mod distortion;
mod error;
pub mod metrics;
pub mod net;
pub mod ply;
pub mod regioning;
pub mod scalar;
pub mod splat;
pub mod subjective;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use splat::{GaussianCloud, GaussianSplat};

/// Training-width model.
pub type Model64 = net::ModelParams<f64>;
/// Inference-width model.
pub type Model32 = net::ModelParams<f32>;
