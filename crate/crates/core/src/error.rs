use thiserror::Error;

/// Error type shared by every module in this crate.
///
/// The variants map onto the CLI exit codes: `Usage` -> 1, `Data`/`Io` -> 2,
/// `Numeric` -> 3.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed arguments that violate an operation's contract
    /// (bad flag values, inconsistent dimensions requested, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Shape/dimension mismatch between tensors or configs.
    #[error("shape error: {0}")]
    Shape(String),

    /// Malformed or inconsistent input data (files, manifests, meshes).
    #[error("data error: {0}")]
    Data(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A computation produced or received a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl Error {
    /// Process exit code for this error, per the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Shape(_) | Error::Data(_) | Error::Io(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
