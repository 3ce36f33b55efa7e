use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error("invalid network: {0}")]
    Validation(String),

    #[error("unbalanced multiphase data is not supported ({0}); convert to a balanced equivalent first")]
    Unbalanced(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("missing profile: {0}")]
    MissingProfile(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("cannot derive a finite big-M for gated row `{0}`")]
    AutoMOverflow(String),

    #[error("solver did not reach a verdict: {0}")]
    Indeterminate(String),

    #[error("statistics undefined: {0}")]
    Degenerate(String),

    #[error("timeseries error: {0}")]
    Timeseries(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Timeseries(e.to_string())
    }
}
