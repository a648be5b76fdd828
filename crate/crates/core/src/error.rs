use thiserror::Error;

use crate::autodiff::AutodiffError;

/// Library error. Each variant maps onto one CLI exit code.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid argument to an operation (out-of-range zone, length mismatch).
    #[error("input error: {0}")]
    Input(String),
    /// Invalid configuration or API misuse.
    #[error("config error: {0}")]
    Config(String),
    /// Malformed or inconsistent data files.
    #[error("data error: {0}")]
    Data(String),
    /// Divergence, NaN gradients, rank-deficient fits.
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Input(_) => "input",
            Error::Config(_) => "config",
            Error::Data(_) | Error::Io { .. } => "data",
            Error::Numerical(_) => "numerical",
            Error::Autodiff(_) => "input",
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) | Error::Autodiff(_) => 2,
            Error::Data(_) | Error::Io { .. } => 3,
            Error::Numerical(_) => 4,
        }
    }
}
