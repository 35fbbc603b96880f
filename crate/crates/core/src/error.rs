use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad flag value, non-dividing head count, mismatched kernel.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor shapes do not satisfy an operation's precondition.
    #[error("shape error: {0}")]
    Shape(String),

    /// A caller broke an operation contract (non-scalar backward, ignore id in a prediction).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("missing sample file: {}", .0.display())]
    MissingSample(PathBuf),

    /// Malformed input data (channel counts, mismatched dims, bad manifest).
    #[error("data format error: {0}")]
    Format(String),

    /// Non-finite value encountered during optimization.
    #[error("numeric failure: non-finite gradient in parameter `{0}`")]
    NonFinite(String),

    #[error("no evaluated pixels")]
    EmptyEvaluation,

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("checkpoint encoding error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Shape(_) => 2,
            Error::MissingSample(_)
            | Error::Format(_)
            | Error::Io { .. }
            | Error::Image { .. }
            | Error::EmptyEvaluation
            | Error::Checkpoint(_) => 3,
            Error::NonFinite(_) => 4,
        }
    }
}
