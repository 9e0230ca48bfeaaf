use thiserror::Error;

/// Failure modes shared by every estimator in the crate.
#[derive(Debug, Error)]
pub enum KoopError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("rank deficient: column {column} has relative singular value {sigma:.3e} (threshold {threshold:.1e})")]
    RankDeficient {
        column: usize,
        sigma: f64,
        threshold: f64,
    },

    #[error("ill-conditioned columns: Gram condition {condition:.3e} exceeds {limit:.1e}")]
    IllConditioned { condition: f64, limit: f64 },

    #[error("eigenvector matrix is (near) defective: condition {condition:.3e}")]
    Defective { condition: f64 },

    #[error("{what} failed to converge for a {rows}x{cols} matrix")]
    NoConvergence {
        what: &'static str,
        rows: usize,
        cols: usize,
    },

    #[error("eigenvalue modulus {modulus} outside the permitted band")]
    ModulusOutOfBand { modulus: f64 },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl KoopError {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            KoopError::RankDeficient { .. }
            | KoopError::IllConditioned { .. }
            | KoopError::Defective { .. } => 3,
            KoopError::NoConvergence { .. } => 4,
            _ => 2,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        KoopError::InvalidInput(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        KoopError::Shape(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, KoopError>;
