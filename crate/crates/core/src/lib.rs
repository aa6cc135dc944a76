//! Training-free, mask-constrained cross-attention guidance for localized
//! diffusion image editing.

pub mod attention;
pub mod backend;
pub mod constraints;
pub mod error;
pub mod guidance;
pub mod inversion;
pub mod latent;
pub mod pipeline;
pub mod prompts;
pub mod schedule;

pub use error::{Error, Result};
pub use latent::{Latent, LatentShape};
