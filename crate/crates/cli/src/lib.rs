//! Command-line front end: file formats, preprocessing, run manifests and the
//! `udm` subcommands.

pub mod batch;
pub mod commands;
pub mod error;
pub mod io;
pub mod manifest;
pub mod preprocess;

pub use commands::{run, Cli, Command};
pub use error::{CliError, CliResult, ErrorKind};
