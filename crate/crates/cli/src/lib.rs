//! Command-line orchestration: synthesis, preprocessing, training,
//! evaluation and report comparison driven by one TOML run configuration.

pub mod commands;
pub mod config;

use radiogen_core::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_INPUT,
    }
}
