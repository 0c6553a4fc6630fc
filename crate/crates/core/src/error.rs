use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid bounds: {0}")]
    Bounds(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("model has not been trained")]
    Untrained,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    ///
    /// | code | meaning |
    /// |------|---------|
    /// | 2 | configuration error |
    /// | 3 | data or file-format error |
    /// | 4 | numerical failure |
    /// | 5 | I/O error |
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Bounds(_) => 2,
            Error::Data(_) | Error::Parse { .. } | Error::Csv(_) | Error::Dimension(_) => 3,
            Error::NonFinite(_)
            | Error::Singular(_)
            | Error::NotPositiveDefinite(_)
            | Error::Numerical(_)
            | Error::Untrained => 4,
            Error::Io(_) => 5,
        }
    }
}

pub(crate) fn ensure_finite<'a, I>(values: I, what: &str) -> Result<()>
where
    I: IntoIterator<Item = &'a f64>,
{
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
