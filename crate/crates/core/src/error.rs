use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A field law, mesh or run parameter violates a precondition.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("assembly error: {0}")]
    Assembly(String),

    /// The right-hand side of a periodic problem is not orthogonal to constants.
    #[error("inconsistent right-hand side: sum = {sum:e} (scale {scale:e})")]
    InconsistentRhs { sum: f64, scale: f64 },

    #[error("solver did not converge after {iterations} iterations (relative residual {residual:e}, target {tol:e})")]
    Solver {
        iterations: usize,
        residual: f64,
        tol: f64,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("realization {index} failed: {source}")]
    Realization {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at_realization(self, index: usize) -> Self {
        match self {
            e @ Error::Realization { .. } => e,
            e => Error::Realization {
                index,
                source: Box::new(e),
            },
        }
    }
}
