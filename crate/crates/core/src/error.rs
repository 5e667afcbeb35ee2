use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: axis `{axis}` expected {expected}, got {actual}")]
    Dimension {
        op: &'static str,
        axis: String,
        expected: String,
        actual: String,
    },
    #[error("label error: label {label} at index {index} is outside [0, {classes})")]
    Label {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("degenerate statistics: {0}")]
    DegenerateStatistics(String),
    #[error("parameter `{0}` has no gradient; run a backward pass first")]
    UninitializedGradient(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("spec error: {0}")]
    Spec(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("state error: {0}")]
    State(String),
    #[error("training failed at step {step}: {reason}")]
    TrainingFailure { step: usize, reason: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("coverage error: missing {}", .0.join(", "))]
    Coverage(Vec<String>),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(
        op: &'static str,
        axis: impl Into<String>,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Dimension {
            op,
            axis: axis.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidArgument(_) | Error::Spec(_) => 2,
            Error::Coverage(_) | Error::Integrity(_) | Error::Checkpoint(_) => 3,
            Error::TrainingFailure { .. } => 4,
            _ => 1,
        }
    }
}
