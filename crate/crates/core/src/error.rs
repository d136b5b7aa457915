use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("class {class} degenerated: responsibility mass {mass:.3} below the minimum")]
    DegenerateClass { class: usize, mass: f64 },

    #[error("class {0} is empty after modal assignment")]
    EmptyClass(usize),

    #[error("aborted after {attempted} replications with only {kept} of {target} convergent")]
    ReplicationBudget {
        attempted: usize,
        kept: usize,
        target: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
