use ladd_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LaddError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("config: {0}")]
    Config(String),

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("training diverged at iteration {iter}: loss {loss}")]
    Diverged { iter: u64, loss: f64 },

    #[error("distillation aborted at iteration {iter}: {reason}; record {record}")]
    DistillAbort { iter: u64, reason: String, record: String },

    #[error("checkpoint field `{field}`: {reason}")]
    Checkpoint { field: &'static str, reason: String },

    #[error("run {run} failed: {source}")]
    Run {
        run: String,
        #[source]
        source: Box<LaddError>,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = LaddError> = std::result::Result<T, E>;

pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> LaddError {
    LaddError::Invalid {
        what,
        reason: reason.into(),
    }
}

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> LaddError {
    LaddError::Io {
        path: path.display().to_string(),
        source,
    }
}
