use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("degenerate penalty: every singular value of the penalty matrix is below the truncation threshold")]
    DegeneratePenalty,

    #[error("covariance matrix is not positive definite even with jitter {jitter:e}")]
    IndefiniteCovariance { jitter: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sampler failed to initialise: {0}")]
    Initialization(String),

    #[error("chains did not converge: {0}")]
    Convergence(String),

    #[error("every predictive draw was rejected by the monotonicity screen; consider relaxing the constraints")]
    EmptyPredictive,

    #[error("prior-level rejection exceeded {attempts} attempts; try a smaller GP scale alpha")]
    RejectionLimit { attempts: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 validation, 3 convergence, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::Schema(_)
            | Error::Parse { .. }
            | Error::Dimension(_)
            | Error::DegenerateInput(_)
            | Error::Domain(_)
            | Error::Config(_) => 2,
            Error::Convergence(_) => 3,
            Error::DegeneratePenalty
            | Error::IndefiniteCovariance { .. }
            | Error::Initialization(_)
            | Error::EmptyPredictive
            | Error::RejectionLimit { .. }
            | Error::Numerical(_) => 4,
        }
    }
}
