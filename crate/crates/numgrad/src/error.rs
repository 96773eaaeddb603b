use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradError {
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: String, detail: String },
    #[error("non-finite value produced at node {node} (`{op}`)")]
    NonFinite { node: usize, op: String },
    #[error("leaf `{0}` is not bound")]
    Unbound(String),
    #[error("graph has not been evaluated")]
    NotEvaluated,
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("function is not deterministic: {0}")]
    NonDeterministic(String),
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("{0}")]
    Custom(String),
}
