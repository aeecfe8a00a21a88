//! Experiment runner for missingness-bias calibration.
//!
//! Reproducible, seed-driven experiments on top of `misscal-core`: the
//! method comparison benchmark, the three-class simplex demo, the
//! training-size sweep, and calibrator persistence. The `misscal` binary
//! exposes each as a subcommand.

pub mod bench;
pub mod config;
pub mod error;
pub mod output;
pub mod persist;
pub mod simplex;
pub mod sweep;

pub use config::{ExperimentConfig, Method};
pub use error::{HarnessError, Result};
