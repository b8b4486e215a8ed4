use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A NaN or infinity showed up where only finite values are allowed.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefixes the message with `what` (a file or flag), keeping the kind.
    pub fn context(self, what: impl std::fmt::Display) -> Self {
        let wrap = |m: String| format!("{what}: {m}");
        match self {
            Error::Shape(m) => Error::Shape(wrap(m)),
            Error::InvalidParameter(m) => Error::InvalidParameter(wrap(m)),
            Error::NonFinite(m) => Error::NonFinite(wrap(m)),
            Error::Autodiff(m) => Error::Autodiff(wrap(m)),
            Error::Format(m) => Error::Format(wrap(m)),
            Error::Infeasible(m) => Error::Infeasible(wrap(m)),
            Error::EmptyDataset(m) => Error::EmptyDataset(wrap(m)),
            e @ Error::Io { .. } => e,
        }
    }

    /// Process exit code under the command-line contract: 2 for data
    /// problems, 3 for numeric failures. Usage errors (1) never reach here.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) | Error::Autodiff(_) => 3,
            _ => 2,
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
macro_rules! param_err {
    ($($arg:tt)*) => { $crate::error::Error::InvalidParameter(format!($($arg)*)) };
}
pub(crate) use param_err;
pub(crate) use shape_err;
