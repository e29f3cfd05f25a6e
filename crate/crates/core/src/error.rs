use std::path::PathBuf;

use thiserror::Error;

/// Every failure the toolkit reports.
///
/// The variants mirror the failure classes the CLI maps onto exit codes:
/// configuration problems exit with 3, everything else with 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("state error: {0}")]
    State(String),

    #[error("statistics error: {0}")]
    Statistics(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("spec error at layer {layer}: {message}")]
    Spec { layer: usize, message: String },

    #[error("parse error in {source_name} at {position}: {message}")]
    Parse {
        source_name: String,
        position: String,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn spec(layer: usize, msg: impl Into<String>) -> Self {
        Error::Spec {
            layer,
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by a bad configuration or search-space spec.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Spec { .. })
    }
}
