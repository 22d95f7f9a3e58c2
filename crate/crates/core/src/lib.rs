//! Physics-guided reverse-diffusion motion capture.
//!
//! A recurrent VAE turns per-frame observation features into latent gaussians,
//! a diffusion denoiser refines motions sampled from those gaussians, and a
//! PD-driven physics tracker feeds projection-loss gradients back into the
//! denoising loop.

pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod motion;
pub mod nn;
pub mod ops;
pub mod synth;
pub mod tracker;
pub mod vae;

pub use error::{Error, Result};
