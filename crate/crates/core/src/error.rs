use std::path::PathBuf;

/// Errors raised by the library. The CLI maps each variant family onto an
/// exit code (see `Error::exit_code`).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unknown tag `{0}` for label scheme")]
    UnknownTag(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 = configuration, 3 = data, 4 = runtime/numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) => 2,
            Error::Parse { .. } | Error::UnknownTag(_) | Error::Data(_) => 3,
            Error::Degenerate(_) | Error::Numeric(_) | Error::Io { .. } | Error::Json(_) => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
