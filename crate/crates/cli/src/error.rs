use std::fmt;

use egocog_core::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const NAN_LOSS: i32 = 4;
    pub const CHECKPOINT: i32 = 5;
}

/// A failure tagged with the exit code of the stage where it happened.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub context: String,
    pub source: Error,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.context, self.source)
    }
}

impl std::error::Error for CliError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Attaches an exit code and context to core errors. Non-finite losses
/// always map to the NaN exit code.
pub trait Stage<T> {
    fn stage(self, code: i32, context: &str) -> CliResult<T>;
}

impl<T> Stage<T> for egocog_core::Result<T> {
    fn stage(self, code: i32, context: &str) -> CliResult<T> {
        self.map_err(|source| {
            let code = if matches!(source, Error::NonFinite { .. }) { exit::NAN_LOSS } else { code };
            CliError {
                code,
                context: context.to_string(),
                source,
            }
        })
    }
}

pub(crate) fn config_error(msg: impl Into<String>) -> CliError {
    CliError {
        code: exit::CONFIG,
        context: "configuration".into(),
        source: Error::BadConfig(msg.into()),
    }
}

pub(crate) fn data_error(context: &str, source: Error) -> CliError {
    CliError {
        code: exit::DATA,
        context: context.into(),
        source,
    }
}
