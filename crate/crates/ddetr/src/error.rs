use thiserror::Error;

/// Errors surfaced by the library and the CLI harness.
#[derive(Debug, Error)]
pub enum DdError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infeasible scene spec: {0}")]
    InfeasibleSpec(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
