use std::path::PathBuf;

/// Errors raised by the fitting library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller supplied an argument outside the documented domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A factorization or solve failed, or an iteration produced non-finite values.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed input in {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn num(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Prefixes the message with extra context, keeping the variant.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::Argument(m) => Error::Argument(format!("{ctx}: {m}")),
            Error::Numerical(m) => Error::Numerical(format!("{ctx}: {m}")),
            other => other,
        }
    }
}
