//! Files, checkpoints and the command line around `ebsg-core`.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod dataset;
pub mod error;
pub mod files;
pub mod manifest;

pub use error::{CliError, CliResult};
