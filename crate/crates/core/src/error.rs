use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed or inconsistent input (shapes, values, file contents).
    #[error("invalid input: {0}")]
    Input(String),

    /// Requested more components than the data supports.
    #[error("{context}: requested {requested} components but only {available} are usable")]
    Rank {
        context: String,
        requested: usize,
        available: usize,
    },

    /// A computation produced a non-finite value or failed to converge.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A metric is not defined for the given data (e.g. R² on constant targets).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Invalid configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A serialized model was written with an incompatible schema.
    #[error("unsupported schema version {found} (expected {expected})")]
    Schema { found: u32, expected: u32 },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
