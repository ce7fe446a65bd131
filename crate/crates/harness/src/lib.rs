//! Command-line front end: configuration files, experiment recipes and
//! reproducible output directories.

pub mod artifacts;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;

pub use cli::{Cli, Command, GlobalArgs};
pub use commands::execute;
pub use error::{HarnessError, Result};
