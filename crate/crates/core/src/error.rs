use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("stale tape: backward called on a tape that was already consumed")]
    StaleTape,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{what} length {len} exceeds limit {limit}")]
    Length {
        what: &'static str,
        len: usize,
        limit: usize,
    },

    #[error("waveform too short: {len} samples, need at least {need}")]
    TooShort { len: usize, need: usize },

    #[error("state error: {0}")]
    State(String),

    #[error("registry error: {0}")]
    Registry(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
