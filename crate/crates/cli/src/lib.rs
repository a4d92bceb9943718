//! Command-line harness: dataset generation, pre-training, policy training,
//! distillation, probing and report generation over a work directory.

pub mod cli;
pub mod commands;
pub mod config;
pub mod layout;
pub mod report;

pub use cli::{run, Cli};
pub use config::ExperimentConfig;
pub use layout::Workdir;

use spin_core::Error;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub const EXIT_OK: u8 = 0;
pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Parse { .. } | Error::Corruption(_) | Error::Incompatible(_) | Error::Io(_) => EXIT_DATA,
        Error::NonFinite { .. } => EXIT_NUMERICAL,
        Error::Dimension { .. } | Error::Index { .. } | Error::Contract(_) => EXIT_INTERNAL,
    }
}
