use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("time {t} outside the domain {domain}")]
    Domain { t: f64, domain: &'static str },

    #[error("time ordering violated: {0}")]
    Ordering(String),

    #[error("posterior is degenerate at t = {t} (sigma_t = 0)")]
    DegeneratePosterior { t: f64 },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("divergence in stage {stage} at step {step}: {reason}")]
    Divergence {
        stage: String,
        step: usize,
        reason: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("oracle unsupported: {0}")]
    UnsupportedOracle(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
