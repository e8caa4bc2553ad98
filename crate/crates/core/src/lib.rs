pub mod backbone;
pub mod checkpoint;
pub mod condition;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod recon;
pub mod sampler;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
