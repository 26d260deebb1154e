//! Experiment harness: datasets, run configuration, metric streams and the
//! training, sweep and benchmark drivers behind the `biasdp` binary.

pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod presets;
pub mod run;
pub mod verify;

pub use error::{HarnessError, Result};
