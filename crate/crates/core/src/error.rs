use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// Variants are grouped so the CLI can map them onto stable exit codes
/// (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive semidefinite (eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("KL support mismatch at index {0}: target is zero where batch mass is positive")]
    SupportMismatch(usize),

    #[error("trajectory state error: {0}")]
    Trajectory(String),

    #[error("dependency error: {0}")]
    Dependency(String),

    #[error("stale artifact: {0}")]
    Stale(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 dependency, 4 numerical, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dimension(_) | Error::Empty(_) | Error::Data(_) => 2,
            Error::Dependency(_) | Error::Stale(_) => 3,
            Error::Numerical(_)
            | Error::NotPsd(_)
            | Error::NotSymmetric(_)
            | Error::Degenerate(_)
            | Error::SupportMismatch(_) => 4,
            Error::Trajectory(_) | Error::Io { .. } | Error::Serde(_) | Error::Csv(_) => 1,
        }
    }
}
