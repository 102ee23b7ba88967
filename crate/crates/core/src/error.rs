use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid law `{law}`: {reason}")]
    InvalidLaw { law: String, reason: String },

    #[error("cannot read model: {0}")]
    Parse(String),

    #[error("argument outside domain: {0}")]
    Domain(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("hypothesis fails: {0}")]
    Hypothesis(String),

    #[error("theorem disabled for this model: {0}")]
    TheoremDisabled(String),

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("population overflow at generation {generation}: total {total} exceeds cap {cap}")]
    Overflow { generation: usize, total: u64, cap: u64 },

    #[error("insufficient data: {needed} admissible points needed, {got} available")]
    InsufficientData { needed: usize, got: usize },

    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, Error>;
