use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid case: {0}")]
    InvalidCase(String),

    #[error("network is islanded: reduced susceptance matrix is singular")]
    Islanded,

    #[error("power flow diverged after {iterations} iterations (mismatch {mismatch:.3e})")]
    Diverged { iterations: usize, mismatch: f64 },

    #[error("system is unobservable: {0}")]
    Unobservable(String),

    #[error("no line satisfies the attack feasibility margin")]
    NoTarget,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("stale activation cache: {0}")]
    StaleCache(String),

    #[error("training diverged at iteration {iteration} (loss {loss})")]
    TrainingDiverged { iteration: usize, loss: f64 },

    #[error("estimator needs {needed} epochs of history, got {available}")]
    WarmUp { needed: usize, available: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("range mismatch: {0}")]
    RangeMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("estimator failure: {0}")]
    Estimator(String),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
