use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("no critical parameter: g(q) = Φ(q) − (q+1)Φ′(q) has no sign change on [{lo}, {hi}]")]
    NoCriticalParameter { lo: f64, hi: f64 },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("memory budget of {budget} entities exceeded at t = {at}; last completed checkpoint index: {last_checkpoint:?}")]
    MemoryBudget {
        budget: usize,
        at: f64,
        last_checkpoint: Option<usize>,
    },

    #[error("empty population")]
    EmptyPopulation,

    #[error("covariance factorization failed for slice [{t1}, {t2}]: {msg}")]
    Factorization { t1: f64, t2: f64, msg: String },

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
