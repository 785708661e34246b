//! Library side of the condgen CLI: configuration layering and the command
//! implementations. The binary in `main.rs` only parses arguments, dispatches
//! here and maps errors onto exit codes.

pub mod commands;
pub mod config;

use condgen_core::Error;

/// Exit codes: 0 success, 2 configuration/usage, 3 data/i-o, 4 numerical.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Usage(_) | Error::Vocab(_) | Error::Shape { .. } => 2,
        Error::Io { .. } | Error::Data(_) => 3,
        Error::Numerical(_) => 4,
    }
}
