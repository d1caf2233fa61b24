//! Command-line front end: configuration, pipelines and artifact writers.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use commands::{run, Command};
pub use config::JobConfig;
pub use error::CliError;
