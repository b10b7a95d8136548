//! File formats and command-line experiments for `smile-core`.

pub mod cli;
pub mod error;
pub mod io;

pub use error::{CliError, Result};
