use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimensions incompatible with the requested construction.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An argument outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// NaN or infinite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("length error in {path}: expected {expected} bytes, found {found}")]
    Length {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("unsupported teacher: {0}")]
    UnsupportedTeacher(String),

    #[error("config parse error: {0}")]
    Parse(String),

    /// Schema violations collected by config validation, as `field.path: message`.
    #[error("invalid config: {}", .0.join("; "))]
    Schema(Vec<String>),

    #[error("missing dependency: {0}")]
    Dependency(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse(_) | Error::Schema(_) | Error::Dependency(_) => 2,
            Error::Numeric(_) => 3,
            _ => 1,
        }
    }
}
