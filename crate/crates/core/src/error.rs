use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the forecasting stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("matrix is not a rotation: {0}")]
    NotARotation(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("bad Savitzky-Golay window: {0}")]
    BadWindow(String),

    #[error("empty stream")]
    EmptyStream,

    #[error("sequence too short: need {needed}, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("too few records: need {needed}, got {got}")]
    TooFew { needed: usize, got: usize },

    #[error("invalid configuration: {0}")]
    BadConfig(String),

    #[error("bad magic in {0}")]
    BadMagic(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("value {value} for {what} is outside [0, 1]")]
    OutOfRange { what: &'static str, value: f64 },

    #[error("predictor used before fitting")]
    UnfitModel,

    #[error("group `{0}` is empty")]
    EmptyGroup(String),

    #[error("zero pooled variance")]
    ZeroVariance,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
