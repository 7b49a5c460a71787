use thiserror::Error;

/// Errors surfaced by the simulator library.
#[derive(Error, Debug)]
pub enum SimError {
    /// Invalid hyperparameters or experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an operation contract (dimension mismatch, wrong
    /// variant, window out of range, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: u64 },

    /// Gradient check rejected the sample; retry with a fresh one.
    #[error("kink guard: {0}")]
    KinkGuard(String),

    /// A report was requested from an incomplete artifact directory.
    #[error("missing artifacts: {}", .0.join(", "))]
    MissingArtifacts(Vec<String>),

    /// Lookup of an unknown taxonomy node.
    #[error("unknown taxonomy node: {0}")]
    UnknownNode(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;

impl SimError {
    pub fn config(msg: impl Into<String>) -> Self {
        SimError::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        SimError::Contract(msg.into())
    }
}
