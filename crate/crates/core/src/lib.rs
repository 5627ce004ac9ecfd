//! Reference-based sketch-to-video colorization with a small diffusion
//! transformer, trained from scratch on procedurally generated animations.
//!
//! Module map:
//!
//! - [`synthgen`]: procedural clips, XDoG sketches, captions, dataset shards
//! - [`nn`]: tensors, reverse-mode differentiation, AdamW, gradient checks
//! - [`latent`]: lossless space-to-depth latentizer
//! - [`backbone`]: the sketch-conditioned denoising transformer
//! - [`colorcond`]: high-level color extractor and low-level color guider
//! - [`diffusion`]: noise schedule, stage losses, DDIM sampling
//! - [`pipeline`]: four-stage training, checkpoints, ablation suite
//! - [`evalkit`]: PSNR/SSIM/sketch alignment, temporal profiles, scenarios
//! - [`config`]: the run configuration file

pub mod backbone;
pub mod colorcond;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod evalkit;
pub mod fsio;
pub mod latent;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod selftest;
pub mod synthgen;

pub use error::{Error, Result};
