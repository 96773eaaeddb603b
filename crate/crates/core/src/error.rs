use std::path::PathBuf;

use numgrad::GradError;
use thiserror::Error;

pub type Result<T, E = CatError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CatError {
    #[error("graph: {0}")]
    Graph(#[from] GradError),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("unknown {kind} `{value}`")]
    Unknown { kind: &'static str, value: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("{}: format version {found}, expected {expected}", path.display())]
    Version { path: PathBuf, expected: u32, found: u32 },
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },
}

impl CatError {
    /// Short stable tag used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            CatError::Graph(_) => "graph",
            CatError::Invalid(_) => "invalid",
            CatError::OutOfRange(_) => "range",
            CatError::Degenerate(_) => "degenerate",
            CatError::Unknown { .. } => "unknown",
            CatError::Io { .. } => "io",
            CatError::Format { .. } => "format",
            CatError::Version { .. } => "version",
            CatError::Diverged { .. } => "diverged",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CatError::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        CatError::Format { path: path.into(), message: message.into() }
    }
}
