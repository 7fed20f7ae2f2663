use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate variance {variance} between t={t_prev} and t={t}")]
    DegenerateVariance { t_prev: f64, t: f64, variance: f64 },

    #[error("numeric overflow in flow block {block}")]
    FlowOverflow { block: usize },

    #[error("inversion failed for x={x} at tau={tau}: bracket did not close")]
    InversionFailure { x: f64, tau: f64 },

    #[error("non-finite gradient for parameter {name}")]
    GradientOverflow { name: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("non-finite loss on batch {batch} (path {path})")]
    NonFiniteLoss { batch: usize, path: usize },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code class: 2 validation, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_)
            | Error::Domain(_)
            | Error::Dataset(_)
            | Error::Config(_)
            | Error::VersionMismatch { .. } => 2,
            Error::DegenerateVariance { .. }
            | Error::FlowOverflow { .. }
            | Error::InversionFailure { .. }
            | Error::GradientOverflow { .. }
            | Error::Numeric(_)
            | Error::NonFiniteLoss { .. } => 3,
            Error::Io(_) | Error::Serde(_) | Error::Csv(_) => 4,
        }
    }
}
