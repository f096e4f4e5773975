//! Command-line front end: configuration files, checkpoints, the pipeline
//! subcommands and the multi-seed experiment drivers.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod experiments;
pub mod pipeline;

pub use checkpoint::Checkpoint;
pub use commands::run;
pub use config::RunConfig;
pub use error::{CliError, CliResult};
