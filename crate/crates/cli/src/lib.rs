//! Command line front end: file handling, manifests and the subcommands.

pub mod commands;
pub mod error;
pub mod fsutil;
pub mod log;
pub mod manifest;
pub mod stitch;

pub use error::{CliError, ExitKind};
