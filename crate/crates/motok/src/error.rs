use std::path::PathBuf;

/// Errors surfaced by file formats, configuration and commands.
#[derive(Debug, thiserror::Error)]
pub enum MotokError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Usage(String),
    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Core(#[from] motok_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = MotokError> = std::result::Result<T, E>;

/// Process exit code for a successful run.
pub const EXIT_OK: i32 = 0;
/// Usage, configuration or missing-input failures.
pub const EXIT_USAGE: i32 = 2;
/// Non-finite values or failed numeric checks.
pub const EXIT_NUMERIC: i32 = 3;

impl MotokError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Numeric(_) | Self::Core(motok_core::Error::NonFinite { .. }) => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }
}
