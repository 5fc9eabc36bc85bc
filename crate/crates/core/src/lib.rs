//! Image-conditioned latent video diffusion at toy scale.
//!
//! A still image is animated by a 3D U-Net denoiser that sees the image twice: as projected
//! encoder tokens through a dedicated cross-attention stream, and as a latent concatenated
//! with the noisy video latents.

pub mod checkpoint;
pub mod codec;
pub mod conditioning;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use candle_core;
pub use config::{ConditioningMode, Config};
pub use error::{Error, Result};
