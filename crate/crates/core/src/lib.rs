//! Two-stage video generation by splitting a clip into one common latent and
//! per-frame unique latents.
//!
//! Stage one ([`vae`]) encodes a clip into a common latent (shared content)
//! and a sequence of unique latents (per-frame content), and decodes each frame
//! from a cascading merge of the two. Stage two ([`ldm`], [`diffusion`])
//! denoises both latent kinds with two coupled UNet streams joined by
//! block-wise spatio-temporal attention. [`generation`] drives sampling,
//! long-video extension and conditional generation.

pub mod checkpoint;
pub mod cli;
pub mod clip;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod generation;
pub mod ldm;
pub mod metrics;
pub mod nn;
pub mod synthetic;
pub mod tensor;
pub mod training;
pub mod vae;

pub use error::{Error, Result};
