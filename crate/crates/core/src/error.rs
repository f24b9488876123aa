use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{role} matrix is not positive definite (jitter escalated to {jitter:e})")]
    Singular { role: String, jitter: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("insufficient replicates: need at least {needed}, got {got}")]
    InsufficientReplicates { needed: usize, got: usize },

    #[error("wavenumber index {index} (k = {k}) is not covered by any source")]
    Coverage { index: usize, k: f64 },

    #[error("source `{which}` has nonzero precision at index {index} but no curve was supplied")]
    MissingSource { which: &'static str, index: usize },

    #[error("fit failed: {reason} (best so far: {best:?})")]
    FitFailure { reason: String, best: Vec<f64> },

    #[error("local regression is singular at x = {0}")]
    SingularFit(f64),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("chain aborted at iteration {iteration}: {cause}")]
    ChainAborted { iteration: usize, cause: Box<Error> },

    #[error("unsupported artifact schema `{found}` (expected major version of `{expected}`)")]
    Schema { found: String, expected: String },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by the numbers rather than by the inputs' shape or
    /// configuration.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Singular { .. }
            | Error::FitFailure { .. }
            | Error::SingularFit(_)
            | Error::ChainAborted { .. } => true,
            _ => false,
        }
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension {
            context,
            expected,
            got,
        });
    }
    Ok(())
}
