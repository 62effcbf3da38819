use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid knot vector: {0}")]
    InvalidKnots(String),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("singular matrix at pivot {pivot} (|entry| = {magnitude:.3e})")]
    SingularMatrix { pivot: usize, magnitude: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("Newton solve did not converge after {iterations} iterations (residual history {history:?})")]
    NewtonDiverged {
        iterations: usize,
        history: Vec<f64>,
    },

    #[error("point inversion failed: {0}")]
    InversionFailed(String),

    #[error("intersection detection failed: {0}")]
    IntersectionFailed(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("invalid document at `{path}`: {message}")]
    Document { path: String, message: String },

    #[error("gradient check failed: {0}")]
    GradientCheck(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
