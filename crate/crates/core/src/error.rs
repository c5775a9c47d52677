use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are inconsistent. `node` is the tape index the
    /// offending operation would have occupied (or `usize::MAX` outside a tape).
    #[error("dimension mismatch at node {node} ({op}): {detail}")]
    Dimension {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("backward requires a 1x1 output; node {node} has shape {rows}x{cols}")]
    NotScalar { node: usize, rows: usize, cols: usize },

    /// The instance exceeds what an exact routine supports.
    #[error("{what}: instance of size {size} exceeds the supported limit {limit}")]
    Capability {
        what: &'static str,
        size: usize,
        limit: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            node: usize::MAX,
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
