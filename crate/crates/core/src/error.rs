use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A state or activation became non-finite.
    #[error("divergence in {context} at step {step}")]
    Divergence { context: String, step: usize },

    #[error("training failed at epoch {epoch}: {reason}")]
    TrainingFailure { epoch: usize, reason: String },

    #[error("query time {query} outside interpolation range [{lo}, {hi}]")]
    Extrapolation { query: f64, lo: f64, hi: f64 },

    #[error("format version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: String, found: String },

    #[error("truncated or malformed file: {0}")]
    Truncated(String),

    #[error("inconsistent dimensions: {0}")]
    Inconsistent(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn diverged(context: impl Into<String>, step: usize) -> Self {
        Error::Divergence {
            context: context.into(),
            step,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Config(_) => "config",
            Error::Divergence { .. } => "divergence",
            Error::TrainingFailure { .. } => "training-failure",
            Error::Extrapolation { .. } => "extrapolation",
            Error::VersionMismatch { .. } => "version-mismatch",
            Error::Truncated(_) => "truncated",
            Error::Inconsistent(_) => "inconsistent",
            Error::Io { .. } => "io",
        }
    }

    /// True for errors caused by bad input or configuration rather than by a
    /// failure while running an otherwise valid job.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_) | Error::Config(_) | Error::VersionMismatch { .. }
        )
    }
}
