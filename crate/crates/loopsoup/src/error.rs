use thiserror::Error;

/// Library-wide error type. Each variant maps onto a process exit code so the
/// CLI can report failures uniformly.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("precision exhausted: {0}")]
    Precision(String),

    #[error("memory guard tripped: {0}")]
    MemoryGuard(String),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Exit code contract: 0 success, 2 config error, 3 precision exhaustion,
    /// 4 memory guard. Everything else is a generic failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) | Error::Parse { .. } => 2,
            Error::Precision(_) => 3,
            Error::MemoryGuard(_) => 4,
            Error::Io(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
