//! Command-line driver: config parsing, the subcommands and their CSV
//! reports.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod reports;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
