//! File formats, reports and the command line around `mofu-core`.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod raster;
pub mod report;

pub use error::{CliError, CliResult};
