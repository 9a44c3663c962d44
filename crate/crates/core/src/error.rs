use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("root finder did not converge for lambda={lambda}, z={z} (residual {residual:.3e})")]
    NoConvergence { lambda: f64, z: f64, residual: f64 },

    #[error("assignment has no nonempty bucket")]
    EmptyAssignment,

    #[error("budget {budget} (bucket cost {cost_per_bucket}, depth {d}) admits no configuration")]
    InfeasibleBudget { budget: u64, cost_per_bucket: u64, d: u32 },

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name, reason: reason.into() }
    }
}
