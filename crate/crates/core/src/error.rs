use thiserror::Error;

/// Errors raised by the numerical pipelines and the experiment runner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("numerical divergence at {stage}")]
    Divergence { stage: String },

    #[error("cumulant undefined outside the moment generating function domain: {0}")]
    Domain(String),

    #[error("index out of range: {what} = {index} (len {len})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("size gate exceeded: {size} > {gate}")]
    SizeGate { size: usize, gate: usize },

    #[error("eigensolver failure: {0}")]
    Eigen(String),

    #[error("loss trace saturated: nonpositive loss at index {0}")]
    Saturated(usize),

    #[error("unsupported measure variant for {0}")]
    Unsupported(&'static str),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
