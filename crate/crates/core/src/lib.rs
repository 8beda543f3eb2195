//! Two-stage image harmonization built on a conditional latent diffusion model.
//!
//! Stage one encodes the composite image with a KL-regularised autoencoder,
//! samples a harmonized latent with a mask- and composite-conditioned UNet
//! (Euler ancestral, few steps, null text context) and decodes it. Stage two
//! is a residual UNet that repairs autoencoder distortion at evaluation
//! resolution. Data loading, synthetic composites, metrics and training loops
//! live alongside.

pub mod checkpoint;
pub mod codec;
pub mod dataset;
pub mod denoiser;
pub mod error;
pub mod imaging;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod refine;
pub mod sampler;
pub mod schedule;
pub mod synth;
pub mod training;
pub mod util;
pub mod vars;

pub use error::{Error, Result};
