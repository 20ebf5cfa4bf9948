use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum EmqError {
    /// Invalid configuration (bad hyper-parameter, malformed grid, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Shape mismatch between tensors / datasets.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Argument outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Dataset-level problem (empty file, non-numeric column, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A numeric invariant broke down (non-finite loss, crossing fan, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// API misuse, e.g. backward without a matching forward.
    #[error("state error: {0}")]
    State(String),

    /// Model container version not understood by this build.
    #[error("model format version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    /// Model container failed structural validation.
    #[error("corrupt model file: {0}")]
    CorruptModel(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl EmqError {
    /// CLI exit code convention: 1 for user/config mistakes, 2 for runtime
    /// or numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            EmqError::Config(_)
            | EmqError::Dimension(_)
            | EmqError::Domain(_)
            | EmqError::Data(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, EmqError>;
