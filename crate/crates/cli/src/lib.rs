//! Orchestration layer: configuration, manifests, run files and the
//! `fomemo` subcommands.
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod runs;

pub use error::{CliError, Result};
