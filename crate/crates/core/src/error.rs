use thiserror::Error;

pub type Result<T> = std::result::Result<T, LmcError>;

#[derive(Debug, Error)]
pub enum LmcError {
    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("node id {id} out of range for graph with {n} nodes")]
    NodeOutOfRange { id: usize, n: usize },

    #[error("feature row count mismatch: expected {expected}, found {found}")]
    FeatureRowMismatch { expected: usize, found: usize },

    #[error("label row count mismatch: expected {expected}, found {found}")]
    LabelRowMismatch { expected: usize, found: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{count} batch combinations exceed the enumeration guard of {limit}")]
    CombinatorialGuard { count: u128, limit: u128 },

    #[error("training diverged: non-finite loss or gradient at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl LmcError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        LmcError::InvalidArgument(msg.into())
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        LmcError::DimensionMismatch(msg.into())
    }
}
