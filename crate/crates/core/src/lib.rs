//! Interactive segmentation refinement driven by a Gaussian-mixture
//! preference distribution.

pub mod adapter;
pub mod clinician;
pub mod error;
pub mod experiments;
pub mod kmeans;
pub mod mask;
pub mod metrics;
pub mod mixture;
pub mod model;
pub mod nn;
pub mod optim;
pub mod phantom;
pub mod proposals;
pub mod rng;
pub mod segmenter;
pub mod session;
pub mod training;

pub use error::{Error, Result};
