//! Files, configuration, checkpoints and the command line for `fmash-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod io;

pub use error::{Error, Result};
