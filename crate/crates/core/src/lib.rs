//! Octree geometry codec for LiDAR point clouds with a learned,
//! hierarchical latent entropy model.

pub mod cli;
pub mod coder;
pub mod entropy;
pub mod metrics;
pub mod error;
pub mod model;
pub mod octree;
pub mod pcio;
pub mod pipeline;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
