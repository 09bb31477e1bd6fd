use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("empty reduction in {op}")]
    EmptyReduction { op: &'static str },
    #[error("backward already ran on this tape")]
    BackwardRanTwice,
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("loss is detached: no gradient-requiring leaf reaches it")]
    DetachedLoss,
    #[error("scribble mask has no annotated pixels")]
    EmptyScribble,
    #[error("degenerate conflict at pixel ({row}, {col}): fused mass vanishes")]
    DegenerateConflict { row: usize, col: usize },
    #[error("degenerate certainty at pixel ({row}, {col}): fused uncertainty is zero")]
    DegenerateCertainty { row: usize, col: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// CLI exit-code class: 1 usage, 2 data/format, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) => 1,
            Error::Io { .. }
            | Error::Format { .. }
            | Error::ConfigMismatch(_)
            | Error::Dataset(_)
            | Error::EmptyScribble => 2,
            Error::NonFinite { .. } | Error::Diverged { .. } => 3,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
