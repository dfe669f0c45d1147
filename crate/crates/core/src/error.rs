use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid sample batch: {0}")]
    InvalidBatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown dataset id `{0}`")]
    UnknownDataset(String),

    #[error("sinkhorn did not converge after {iterations} iterations (marginal violation {violation:e})")]
    SinkhornNotConverged { iterations: usize, violation: f64 },

    #[error("posterior is degenerate: {0}")]
    DegeneratePosterior(String),

    #[error("time {t} outside the clamped range [{lo}, {hi}]")]
    TimeOutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("non-finite state at step {step}")]
    NonFiniteState { step: usize },

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("noise level ordering violated: {from} -> {to} is not a {direction} step")]
    LevelOrder {
        from: f64,
        to: f64,
        direction: &'static str,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
