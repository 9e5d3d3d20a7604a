use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor or image dimension does not satisfy an operation's contract.
    #[error("shape mismatch on axis {axis}: {message}")]
    Shape { axis: usize, message: String },

    /// A precondition of a public operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Unsupported or malformed file content; the message names the format.
    #[error("format error: {0}")]
    Format(String),

    /// Text parse failure (plan files, manifests, checkpoints headers).
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Loss became non-finite during optimization.
    #[error("training diverged at iteration {iteration}: {message}")]
    Training { iteration: usize, message: String },

    /// A required checkpoint or artifact from an earlier stage is missing.
    #[error("missing prerequisite for stage `{stage}`: {message}")]
    Dependency { stage: String, message: String },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn shape(axis: usize, msg: impl Into<String>) -> Self {
        Error::Shape {
            axis,
            message: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
