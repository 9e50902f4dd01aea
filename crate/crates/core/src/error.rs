use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("ray does not intersect plane (direction parallel to plane)")]
    NoIntersection,

    #[error("projection failed: {0}")]
    Projection(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation error at line {line}: {message}")]
    Validation { line: usize, message: String },

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("ill-conditioned covariance: {0}")]
    IllConditioned(String),

    #[error("hyperparameter optimization failed: {0}")]
    Optimization(String),

    #[error("singular design matrix (rank {rank} < {cols} columns)")]
    SingularDesign { rank: usize, cols: usize },

    #[error("fold {fold} (test driver {driver}): {source}")]
    Fold {
        fold: usize,
        driver: String,
        #[source]
        source: Box<Error>,
    },

    #[error("model format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable short name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::DegenerateGeometry(_) => "degenerate_geometry",
            Error::NoIntersection => "no_intersection",
            Error::Projection(_) => "projection",
            Error::Parse { .. } => "parse",
            Error::Schema(_) => "schema",
            Error::Validation { .. } => "validation",
            Error::TrainingDiverged { .. } => "training_diverged",
            Error::IllConditioned(_) => "ill_conditioned",
            Error::Optimization(_) => "optimization",
            Error::SingularDesign { .. } => "singular_design",
            Error::Fold { source, .. } => source.kind(),
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
