//! Command-line surface: corpus preparation, training, indexing, retrieval
//! and evaluation driven by one flat JSON config.

pub mod commands;
pub mod config;
pub mod failure;
pub mod output;

pub use commands::{run, Cli, Command};
pub use config::RunConfig;
pub use failure::{error_line, Failure};
