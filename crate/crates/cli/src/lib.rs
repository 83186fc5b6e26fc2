//! Experiment harness around `rfga-core`: configuration, checkpoints, CSV
//! reports, raster/SVG output and the command implementations behind the
//! `rfga` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod csv;
pub mod render;

pub use config::{ConfigError, ExperimentConfig};
