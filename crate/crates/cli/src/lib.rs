//! Library half of the `geoscale` command: file formats, configuration and the command
//! implementations, kept separate from argument parsing so they can be tested directly.

pub mod commands;
pub mod config;
pub mod error;
pub mod selftest;
pub mod tensor_file;

pub use error::{CliError, Result};
