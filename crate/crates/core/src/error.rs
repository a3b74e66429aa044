use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("ingestion error for sample `{sample_id}`: {reason}")]
    Ingestion { sample_id: String, reason: String },

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at iteration {iteration} in batch [{}]", .sample_ids.join(", "))]
    NonFiniteLoss {
        iteration: usize,
        sample_ids: Vec<String>,
    },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn ingestion(sample_id: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Ingestion {
            sample_id: sample_id.into(),
            reason: reason.into(),
        }
    }
}
