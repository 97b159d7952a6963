//! Crate-wide error type.
//!
//! Every fallible operation reports which computation produced the failure;
//! numerical trouble (NaN/Inf) is an error, never a silent value.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {expected} vs {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}{}", detail.as_ref().map(|d| format!(" ({d})")).unwrap_or_default())]
    NonFinite {
        op: &'static str,
        detail: Option<String>,
    },

    #[error("empty input to {op}")]
    EmptyInput { op: &'static str },

    #[error("labels are degenerate: {detail}")]
    DegenerateLabels { detail: String },

    #[error("evaluation window {start}..={end} contains no epochs")]
    EmptyWindow { start: usize, end: usize },

    #[error("invalid spec: {detail}")]
    InvalidSpec { detail: String },

    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("anomalous sample {index} has an empty ground-truth mask")]
    MissingMask { index: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn non_finite(op: &'static str) -> Self {
        Error::NonFinite { op, detail: None }
    }

    pub fn non_finite_at(op: &'static str, detail: impl Into<String>) -> Self {
        Error::NonFinite {
            op,
            detail: Some(detail.into()),
        }
    }

    pub fn invalid_spec(detail: impl Into<String>) -> Self {
        Error::InvalidSpec {
            detail: detail.into(),
        }
    }

    pub fn format(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
