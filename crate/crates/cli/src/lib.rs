//! Reproducible command-line workflows over `smp-core`: solve a benchmark,
//! run spike ladders, check the maximum principle and run the acceptance
//! suite. Reports are JSON, tables are CSV.

pub mod acceptance;
pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
