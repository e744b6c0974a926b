use thiserror::Error;

/// Error type shared by every module in the crate.
///
/// Variants map onto the process exit codes used by the CLI:
/// `Config` -> 2, `Data`/`Parse`/`Io` -> 3, `Numeric` -> 4, anything else -> 1.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Operand shapes are inconsistent for a tensor primitive.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A caller violated an operation's stated contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration (bad hyperparameter, malformed config file).
    #[error("configuration error: {0}")]
    Config(String),

    /// Dataset-level problem (missing class, insufficient samples).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed input file content.
    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    /// Key generation or ciphertext handling failure.
    #[error("crypto error: {0}")]
    Crypto(String),

    /// Aggregation protocol misuse (mismatched keys or encodings).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Non-finite value where the contract promises finiteness.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        CoreError::Shape { op, detail: detail.into() }
    }

    pub fn contract(detail: impl Into<String>) -> Self {
        CoreError::Contract(detail.into())
    }

    pub fn config(detail: impl Into<String>) -> Self {
        CoreError::Config(detail.into())
    }

    pub fn data(detail: impl Into<String>) -> Self {
        CoreError::Data(detail.into())
    }

    /// Exit code the CLI reports for this error.
    pub fn exit_code(&self) -> u8 {
        match self {
            CoreError::Config(_) => 2,
            CoreError::Data(_) | CoreError::Parse { .. } | CoreError::Io(_) => 3,
            CoreError::Numeric(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
