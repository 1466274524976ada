//! Dual-branch diffusion inpainting toolkit.
//!
//! A frozen base denoiser is steered by a trainable control branch that sees
//! the noisy latent, the masked-image latent and the mask. Branch layer and
//! cross-attention features enter the base through zero-initialised
//! projections scaled by a preservation factor `w`. Training adds an
//! attention loss that pulls the branch's prompt-token attention onto the
//! mask. Around the model sit mask synthesis, dataset construction and a
//! benchmark harness.

pub mod error;
pub mod maskgen;
pub mod nn;
pub mod par;
pub mod raster;
pub mod text;

pub use error::{PainterError, Result};
pub mod branch;
pub mod schedule;
pub mod vae;
pub mod losses;
pub mod datapipe;
pub mod synth;
pub mod model;
pub mod trainer;
pub mod pipeline;
pub mod evalbench;
