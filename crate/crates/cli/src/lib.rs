//! Std side of hymesh: binary tensor files, JSON configs, topologies and
//! checkpoints, CSV/OBJ reports, and the `hymesh` command line.

pub mod commands;
pub mod error;
pub mod files;
pub mod report;
pub mod tensor_io;

pub use error::{CliError, Result};
