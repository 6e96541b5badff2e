//! File formats and the `ctalign` command line around [`ctalign_core`].

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod formats;

pub use error::{CliError, Result};
