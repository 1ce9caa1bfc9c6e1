//! Error type shared across the engine.
//!
//! Every fallible public operation returns [`Result`]. Variant choice matters
//! downstream: the CLI maps `Config`/`Parse` to exit code 1 and everything
//! else to exit code 2.

/// Unified error for tensor ops, training, data loading, and the CLI.
#[derive(Debug, thiserror::Error)]
pub enum PstError {
    /// Shape or axis mismatch between operands.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An API contract was violated (non-scalar loss, label outside the
    /// active set, frozen unit re-frozen, empty test set, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A NaN or Inf appeared in the output of a numeric operation.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Invalid run configuration; message lists every offending field.
    #[error("configuration error: {0}")]
    Config(String),

    /// A layer cannot supply the requested number of free units.
    #[error("capacity exhausted in layer {layer}: requested {requested} units, only {free} free")]
    CapacityExhausted {
        layer: String,
        requested: usize,
        free: usize,
    },

    /// Malformed input file; `offset` is the byte position where parsing failed.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PstError>;

impl PstError {
    /// Process exit code the CLI reports for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            PstError::Config(_) | PstError::Parse { .. } => 1,
            _ => 2,
        }
    }
}
