//! Modality-guided fusion for cross-modal (image + LiDAR) unsupervised domain
//! adaptation in point cloud semantic segmentation.

pub mod container;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod synthio;
pub mod trainer;

pub use error::{Error, Result};
