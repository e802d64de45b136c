//! Gradient-descent temporal fusion for voxel occupancy prediction.

pub mod config;
pub mod error;
pub mod experiment;
pub mod gdft;
pub mod geometry;
pub mod gradcheck;
pub mod metrics;
pub mod motion;
pub mod oracle;
pub mod pipeline;
pub mod scene;
pub mod synthworld;
pub mod tensor;
pub mod voxel;

pub use error::{Error, Result};
