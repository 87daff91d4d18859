use thiserror::Error;

/// Errors surfaced by the library. Each variant maps to one machine-parseable
/// category used by the CLI (`error[<category>]: ...`).
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid run configuration (bad key, bad value, inconsistent combination).
    #[error("config: {0}")]
    Config(String),

    /// Array extents do not line up for an operation.
    #[error("dimension: {0}")]
    Dimension(String),

    /// A documented precondition was violated (empty valid set, bad range, ...).
    #[error("contract: {0}")]
    Contract(String),

    /// Underlying filesystem failure.
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// A file did not match its binary or textual layout.
    #[error("format: {0}")]
    Format(String),

    /// Non-finite values where finite ones are required (e.g. diverged training).
    #[error("numeric: {0}")]
    Numeric(String),
}

impl Error {
    /// Stable one-word category for machine parsing of CLI failures.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Dimension(_) => "dimension",
            Error::Contract(_) => "contract",
            Error::Io(_) => "io",
            Error::Format(_) => "format",
            Error::Numeric(_) => "numeric",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
