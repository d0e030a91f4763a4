use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter `{name}` out of domain: {value}")]
    ParameterDomain { name: &'static str, value: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("parse error in `{field}`: {message}")]
    Parse { field: String, message: String },

    #[error("unsupported schema version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at iteration {iteration} (cbf={cbf}, at={at}, t1b={t1b})")]
    NonFinite {
        iteration: usize,
        cbf: f64,
        at: f64,
        t1b: f64,
    },

    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn dataset(msg: impl Into<String>) -> Self {
        Error::Dataset(msg.into())
    }
}
