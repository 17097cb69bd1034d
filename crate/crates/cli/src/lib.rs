//! Library side of the `handiff` command: run configuration, checkpoints and
//! the subcommand bodies.

pub mod checkpoint;
pub mod commands;
pub mod config;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::RunConfig;

use handiff_core::Error;

/// Process exit status for an error: 2 configuration, 3 data format,
/// 4 numeric failure, 1 anything else (missing files and the like).
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Contract(_) => 2,
        Error::Format { .. } | Error::Dimension { .. } => 3,
        Error::Numeric(_) | Error::NonFinite { .. } | Error::UndefinedMetric(_) => 4,
        Error::Io(_) => 1,
    }
}
