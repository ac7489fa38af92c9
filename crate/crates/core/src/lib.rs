pub mod aux_model;
pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod image_model;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
