//! Operator surface for the SSL workbench: configuration, dataset
//! generation and ingestion, and the pretrain / finetune / probe /
//! analyze / report commands.

pub mod commands;
pub mod config;
pub mod plots;

pub use commands::{run_command, Command};
pub use config::{DtypeChoice, RunConfig, OUTPUT_ROOT_ENV};

use mocolab_core::error::Error;

/// Process exit code for an error: 2 config, 3 data, 4 numeric.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Usage { .. } | Error::Dimension { .. } => 2,
        Error::Data(_) | Error::Io { .. } => 3,
        Error::Numeric { .. } => 4,
    }
}
