//! Command-line driver for the altflow library. Experiments are described
//! by a TOML config plus a handful of flag overrides; every command writes
//! its resolved config next to its outputs so runs can be replayed exactly.

pub mod commands;
pub mod config;
pub mod pool;
pub mod run;

use altflow::error::Error;

/// Process exit code for a failed command.
///
/// 2: the experiment description is unusable (config/flags). 3: the inputs
/// could not be read or do not fit together. 4: the computation itself broke
/// down numerically.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::InvalidSpec { .. } => 2,
        Error::Format { .. }
        | Error::MissingMask { .. }
        | Error::Io { .. }
        | Error::ShapeMismatch { .. }
        | Error::DegenerateLabels { .. }
        | Error::EmptyInput { .. }
        | Error::EmptyWindow { .. } => 3,
        Error::NonFinite { .. } | Error::Domain { .. } => 4,
    }
}
