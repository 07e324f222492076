//! Config-driven command-line runs: generate, prepare, train, evaluate,
//! explain and benchmark, each writing hash-stamped artifacts.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

pub use commands::Run;
pub use config::{Family, RunConfig, Seeds};
pub use error::{CliError, CliResult};
