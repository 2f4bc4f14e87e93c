//! One-stage multi-person pose estimation from simulated IR-UWB radar frames.

pub mod check;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod layers;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod params;
pub mod seed;
pub mod sim;
pub mod ssl;
pub mod train;

pub use error::{PoseError, Result};
