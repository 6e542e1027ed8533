//! Gaussian-process regression for battery capacity prognostics.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod gp;
pub mod kernels;
pub mod linalg;
pub mod meanfn;
pub mod optimize;
pub mod prognostics;
pub mod synthetic;

pub use error::{Error, Result};
