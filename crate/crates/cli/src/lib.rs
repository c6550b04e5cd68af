//! Command-line driver for faultlab: grid training into a model zoo,
//! Monte-Carlo fault sweeps, and analysis of the resulting CSVs.

pub mod blob;
pub mod commands;
pub mod error;
pub mod grid;
pub mod results;
pub mod zoo;

pub use error::{CliError, Result};
