use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("{path}: line {line}: {reason}")]
    Ingestion {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    #[error("metric undefined for class {class}: {reason}")]
    MetricUndefined { class: usize, reason: String },

    #[error("training diverged at epoch {epoch} (last good epoch: {last_good:?}): {reason}")]
    Divergence {
        epoch: usize,
        last_good: Option<usize>,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(arg: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            arg,
            reason: reason.into(),
        }
    }
}
