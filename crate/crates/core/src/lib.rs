pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod denoiser;
pub mod detector;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod schedule;

pub use error::{Error, Result};
