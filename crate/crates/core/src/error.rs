use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CareError> = std::result::Result<T, E>;

/// Errors raised anywhere in the aggregation pipeline.
///
/// Variants split into two families: bad input (files, shapes, parameters)
/// and numerical failure (singular matrices, solver breakdowns). The CLI maps
/// them to different exit codes via [`CareError::is_numerical`].
#[derive(Debug, Error)]
pub enum CareError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("too many missing values for judge(s) {judges:?} ({dropped} of {total} rows unusable)")]
    TooManyMissing {
        judges: Vec<String>,
        dropped: usize,
        total: usize,
    },

    #[error("judge `{0}` has zero variance")]
    ZeroVariance(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("matrix is singular even with ridge {ridge:e}")]
    Singular { ridge: f64 },

    #[error("no latent structure (low-rank part is numerically zero); increase tau or check data")]
    NoLatentStructure,

    #[error("solver diverged: objective rose from {prev} to {next} at iteration {iter}")]
    Divergence { iter: usize, prev: f64, next: f64 },

    #[error("tensor decomposition failed on every restart (best fit {best_fit:.4}); try a larger sample or different (gamma, tau)")]
    CpFailed { best_fit: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CareError {
    /// True for failures of the numerics rather than of the input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            CareError::Singular { .. }
                | CareError::NoLatentStructure
                | CareError::Divergence { .. }
                | CareError::CpFailed { .. }
                | CareError::Numerical(_)
        )
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CareError::InvalidInput(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        CareError::Shape(msg.into())
    }
}
