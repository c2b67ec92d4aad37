use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("empty kernel neighborhood (total weight {0:e})")]
    EmptyNeighborhood(f64),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("ordering error: expected p1 > p2, got p1={p1}, p2={p2}")]
    Ordering { p1: f64, p2: f64 },
    #[error("unsupported mode: {0}")]
    UnsupportedMode(String),
    #[error("estimator undefined: {0}")]
    Undefined(String),
    #[error("matching failed: {0}")]
    MatchFailed(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnsupportedMode(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
