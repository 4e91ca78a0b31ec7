use thiserror::Error;

/// Unified error type for the whole engine.
#[derive(Debug, Error)]
pub enum ApamError {
    /// Tensor shapes do not conform to an op's contract.
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A scalar argument is outside its admissible range.
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },

    /// A caller violated an API precondition.
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    /// Malformed or unusable input data.
    #[error("ingest error: {0}")]
    Ingest(String),

    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A non-finite value surfaced during training.
    #[error("numeric abort at {stage}: {msg}")]
    Numeric { stage: String, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ApamError>;

impl ApamError {
    pub fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        ApamError::Contract {
            op,
            msg: msg.into(),
        }
    }

    pub fn domain(op: &'static str, msg: impl Into<String>) -> Self {
        ApamError::Domain {
            op,
            msg: msg.into(),
        }
    }

    pub fn numeric(stage: impl Into<String>, msg: impl Into<String>) -> Self {
        ApamError::Numeric {
            stage: stage.into(),
            msg: msg.into(),
        }
    }
}
