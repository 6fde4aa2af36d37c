//! Multi-β variational autoencoder with a non-linear latent diffusion model.
//!
//! The crate trains a single VAE across a continuum of regularization weights
//! `β ∈ [0, B]`, learns the per-β latent noise levels as a diffusion schedule,
//! and trains a two-head denoiser that walks high-β (disentangled) latents back
//! to β = 0 (informative) latents. Disentanglement metrics, latent editing
//! tools and a reproducible CLI harness sit on top.
//!
//! Everything runs on the CPU in `f64`.

pub mod data;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod latent;
pub mod math;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod vae;

pub use error::{Error, Result};
pub use math::schedule::{Schedule, ShapeTag};
