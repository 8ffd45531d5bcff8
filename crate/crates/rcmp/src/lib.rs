//! Model files, synthetic dataset, benchmarking and the `rcmp` command
//! line on top of `rcmp-core`.

pub mod bench;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod format;

pub use error::{Error, FormatError, Result};
