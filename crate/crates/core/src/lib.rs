//! Confidence-aware cross pseudo supervision for semi-supervised,
//! domain-generalized 2-D segmentation.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod fourier;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod raster;
pub mod segnet;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
