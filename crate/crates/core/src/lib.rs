pub mod cli;
pub mod codebook;
pub mod config;
pub mod connectivity;
pub mod error;
pub mod experiment;
pub mod fewshot;
pub mod image;
pub mod layout;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod scenegen;

pub use error::{Error, Result};
