//! Batch commands behind the `starembed` binary.

mod commands;
mod config;

pub use commands::*;
pub use config::{Method, Overrides, RunConfig, RunConfigFile};
