//! Library side of the `wsde` command: configuration and the subcommands.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{cmd_ablate, cmd_eval, cmd_forecast, cmd_train};
pub use config::{Overrides, RunConfig};
pub use error::{CliError, CliResult};
