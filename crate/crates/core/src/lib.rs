//! Motion forecasting with a unified attention encoder and selective-state-space
//! embedding/decoding over vectorized driving scenes.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod features;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod render;
pub mod scene;
pub mod ssm;
pub mod training;

pub use error::{CoreError, Result};
pub use model::{Hamf, Hamf32, Hamf64, ModelConfig, ModelOutput};
