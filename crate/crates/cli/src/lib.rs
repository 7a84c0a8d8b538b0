//! Command implementations behind the `sptx` binary.

pub mod commands;
pub mod config;

use std::fmt;

/// Bad invocation or configuration detected by the CLI itself.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Process exit status for a failed command: 1 for validation and
/// configuration problems, 2 for failures while running.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<sptx_core::Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}
