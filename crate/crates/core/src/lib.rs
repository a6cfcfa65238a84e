pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gradcore;
pub mod rng;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
