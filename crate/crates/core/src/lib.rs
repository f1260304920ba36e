pub mod checkpoint;
pub mod dataset;
pub mod diffusion;
pub mod diversity;
pub mod error;
pub mod filter;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod pretrain;
pub mod prompt;
pub mod rng;
pub mod sprite;

pub use error::{Error, Result};
