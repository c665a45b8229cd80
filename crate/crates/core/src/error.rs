use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid label {label}: expected a value in [0, {bound})")]
    InvalidLabel { label: usize, bound: usize },

    #[error("{0} is not connected to the differentiated score")]
    NotConnected(&'static str),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("malformed file name {path}: {reason}")]
    FileName { path: PathBuf, reason: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    /// Short category used on the command line (`error[<category>]: ...`).
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) | Error::InvalidInput(_) | Error::InvalidLabel { .. } => "input",
            Error::NotConnected(_) => "graph",
            Error::Config(_) => "config",
            Error::Dataset(_) | Error::FileName { .. } => "dataset",
            Error::Evaluation(_) => "evaluation",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } | Error::Image { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
