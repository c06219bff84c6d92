//! Reconstruction-based out-of-distribution detection.
//!
//! Images are embedded by a contrastively trained dual encoder, reconstructed
//! by a denoising diffusion model conditioned on that embedding, and flagged as
//! out-of-distribution when the reconstruction error exceeds a threshold
//! calibrated on in-distribution data.

pub mod autograd;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod mlp;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
