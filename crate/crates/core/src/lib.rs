//! Latent adversarial diffusion distillation on toy latent distributions.

pub mod cli;
pub mod data;
pub mod distill;
pub mod error;
pub mod evalbench;
pub mod flow;
pub mod nets;
pub mod rng;
pub mod teacher;

pub use error::{LaddError, Result};
