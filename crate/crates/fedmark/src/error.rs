use std::path::PathBuf;

/// Crate-wide error type.
///
/// The CLI maps error categories to stable exit codes: config/schema errors
/// exit with 2, numerical aborts with 3, everything else with 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("watermark error: {0}")]
    Watermark(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// The process exit code this error maps to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numerical(_) => 3,
            _ => 1,
        }
    }
}
