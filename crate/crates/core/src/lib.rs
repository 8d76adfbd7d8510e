//! Part-factorized generative modelling of segmented point clouds.

pub mod config;
pub mod data;
pub mod dataset;
pub mod denoiser;
pub mod error;
pub mod kernel;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod sampler;
pub mod stylizer;
pub mod train;
pub mod wire;

pub use error::{Error, Result};
