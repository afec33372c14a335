use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data violates a dataset invariant.
    #[error("data error: {0}")]
    Data(String),

    /// Invalid configuration or arguments.
    #[error("usage error: {0}")]
    Usage(String),

    /// The data cannot support the requested model (e.g. a fitting arm is
    /// empty on every iteration).
    #[error("data adequacy error: {0}")]
    Adequacy(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Data(_) | Error::Csv(_) | Error::Io(_) | Error::Json(_) => 3,
            Error::Adequacy(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Data(_) => "data",
            Error::Usage(_) => "usage",
            Error::Adequacy(_) => "adequacy",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
