use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands have incompatible shapes.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    /// A configuration value is out of range or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A numerical routine produced a non-finite value.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A loss function returned different values for identical parameters.
    #[error("loss function is not deterministic: {first} then {second}")]
    Determinism { first: f64, second: f64 },

    /// Input data failed validation.
    #[error("validation error: {0}")]
    Validation(String),

    /// A dataset record could not be parsed.
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    /// An aggregate was requested over no elements.
    #[error("cannot aggregate an empty set")]
    EmptySet,

    /// A train/test split could not be formed.
    #[error("split error: {0}")]
    Split(String),

    /// A rank table is missing a score.
    #[error("incomplete table: method {method:?} has no score for {metric:?}")]
    IncompleteTable { method: String, metric: String },

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::Dimension { op, lhs, rhs }
    }
}
