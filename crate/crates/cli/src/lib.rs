//! Command-line front end: config loading, commands, and the cropped-region
//! evaluation harness.

pub mod commands;
pub mod config;
pub mod eval;

pub use commands::{exit_code, run, Cli, Command};
pub use config::RunConfig;
