//! Error type shared across the toolkit.

/// All failure modes surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape or size preconditions violated.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An operation contract was violated (empty inputs, missing gradients,
    /// foreign graph handles, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid configuration value, named by field.
    #[error("config error: {0}")]
    Config(String),

    /// Text input could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Binary input has a bad magic, version, checksum, or length.
    #[error("format error: {0}")]
    Format(String),

    /// Data is unusable for the requested computation (e.g. zero variance).
    #[error("degenerate data: {0}")]
    DegenerateData(String),

    /// A loss or metric became non-finite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 verification/contract failure,
    /// 2 usage error, 3 I/O or format error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_)
            | Error::Contract(_)
            | Error::DegenerateData(_)
            | Error::NonFinite(_) => 1,
            Error::Config(_) => 2,
            Error::Parse { .. } | Error::Format(_) | Error::Io(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
