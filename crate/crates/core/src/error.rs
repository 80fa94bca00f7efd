use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("assumption H0 violated: dim {dim} > n - 2 with n = {n}")]
    H0Violation { dim: usize, n: usize },

    #[error("root solver did not converge after {iterations} iterations (bracket [{lo}, {hi}])")]
    Solver { iterations: usize, lo: f64, hi: f64 },

    #[error("infeasible: {0}")]
    Feasibility(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short stable tag used in machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::H0Violation { .. } => "h0_violation",
            Error::Solver { .. } => "solver",
            Error::Feasibility(_) => "feasibility",
            Error::Config(_) => "config",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
