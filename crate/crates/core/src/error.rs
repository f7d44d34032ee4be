use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} outside of the valid domain {domain}")]
    Domain { t: f64, domain: String },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("non-finite value encountered in {context} at step {step}")]
    NonFinite { context: String, step: usize },

    #[error("training diverged in {context} at step {step}: loss {loss:e}")]
    Divergence {
        context: String,
        step: usize,
        loss: f64,
        /// Tail of the loss trace at the point of divergence.
        trace: Vec<f64>,
    },

    #[error("singular conditioning covariance (condition number {condition:e})")]
    Singular { condition: f64 },

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("invalid coupling: {0}")]
    Coupling(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("g^2(t) vanishes at t = {t}; time excluded from the path estimate")]
    ExcludedTime { t: f64 },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(t: f64, lo: f64, hi: f64) -> Self {
        Error::Domain {
            t,
            domain: format!("[{lo}, {hi}]"),
        }
    }

    pub(crate) fn dims(expected: usize, got: usize, context: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            expected,
            got,
            context: context.into(),
        }
    }

    /// Process exit code used by the command line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Divergence { .. } | Error::NonFinite { .. } | Error::Singular { .. } => 3,
            Error::Io(_) | Error::Checkpoint(_) | Error::Json(_) => 4,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain { .. } => "domain",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::Divergence { .. } => "divergence",
            Error::Singular { .. } => "singular",
            Error::Schedule(_) => "schedule",
            Error::Coupling(_) => "coupling",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::ExcludedTime { .. } => "excluded_time",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
