use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("configuration key `{key}` expects {expected}, got `{got}`")]
    TypeMismatch {
        key: String,
        expected: String,
        got: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("cannot place two disjoint {patch}x{patch} patches in a {height}x{width} image")]
    PatchSizing {
        height: usize,
        width: usize,
        patch: usize,
    },

    #[error("patient `{0}` has no slices left after filtering")]
    EmptyPatient(String),

    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),

    #[error("cannot build {k} folds: {msg}")]
    Folds { k: usize, msg: String },

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing upstream artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("training failed: {0}")]
    Training(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {msg}")]
    Format { context: String, msg: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(context: impl Into<String>, msg: impl ToString) -> Self {
        Error::Format {
            context: context.into(),
            msg: msg.to_string(),
        }
    }

    /// Process exit status for the CLI: 2 config, 3 data, 4 training.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::UnknownKey(_) | Error::TypeMismatch { .. } | Error::Config(_) => 2,
            Error::Training(_) | Error::UndefinedAuc(_) | Error::Folds { .. } => 4,
            _ => 3,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
