use thiserror::Error;

pub type Result<T, E = HsflError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HsflError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// The convergence denominator or a memory budget rules the plan out.
    #[error("infeasible: {reason} (margin {margin:.6e})")]
    Infeasible {
        reason: String,
        /// Remaining slack; non-positive when the plan is infeasible.
        margin: f64,
        /// Per-tier drift contributions at the rejected point, when known.
        tier_terms: Vec<f64>,
    },

    #[error("solver did not converge after {iterations} iterations: {detail}")]
    NonConvergence {
        iterations: usize,
        detail: String,
        last_iterate: Vec<f64>,
    },

    #[error("model construction error: {0}")]
    ModelConstruction(String),
}

impl HsflError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        HsflError::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        HsflError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
