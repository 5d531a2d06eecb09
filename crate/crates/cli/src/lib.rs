//! Config-driven experiment runner on top of `tokenwalk`.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiments;
pub mod manifest;

pub use commands::{run, Cli};
pub use error::CliError;
