//! Diffusion transformer over point-track tokens, its sampler and trainer.

pub mod checkpoint;
pub mod diffusion;
pub mod error;
pub mod forecast;
pub mod net;
pub mod trainer;

pub use error::{ModelError, Result};
