use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("no segment reaches the minimum pseudo-label size of {min_fg} px (largest is {largest} px)")]
    SelectionExhausted { min_fg: usize, largest: usize },

    #[error("episode construction failed: {0}")]
    EpisodeConstruction(String),

    #[error("episode skipped: {0}")]
    EpisodeSkip(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

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

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line driver: 2 configuration,
    /// 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) | Error::Config(_) | Error::Validation(_) | Error::Parse { .. } | Error::Json(_) => 2,
            Error::Numerical(_) => 4,
            Error::Data(_)
            | Error::SelectionExhausted { .. }
            | Error::EpisodeConstruction(_)
            | Error::EpisodeSkip(_)
            | Error::Checkpoint { .. }
            | Error::Io { .. }
            | Error::Image { .. } => 3,
        }
    }
}
