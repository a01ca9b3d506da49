//! Aligning per-frame vision features into a frozen concept (sentence-embedding)
//! space, a latent-diffusion model that predicts the next embedding of a
//! sequence, and metrics for inspecting the resulting space.

pub mod aligner;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod latentdiff;
pub mod nn;
pub mod numerics;
pub mod projector;
pub mod spaceval;

pub use error::{Error, Result};
