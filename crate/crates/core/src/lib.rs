//! Absorbing-state discrete diffusion over token sequences with a dual
//! masked/score objective, a grouped mixture-of-experts denoiser, and an
//! enumeration-based bound verifier.
//!
//! All numerical code is generic over [`scalar::Scalar`]; training runs in
//! `f32`, gradient checks and the verifier in `f64`. Concrete aliases for
//! the common instantiations live at the crate root.

pub mod checkpoint;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod moe;
pub mod objective;
pub mod oracle;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod tensor;
pub mod verifier;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// `f32` tensor used throughout training.
pub type Tensor32 = tensor::Tensor<f32>;
/// `f64` tensor used by gradient checks and the verifier.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Posterior32 = losses::PosteriorPrediction<f32>;
pub type Posterior64 = losses::PosteriorPrediction<f64>;
