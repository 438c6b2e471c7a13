use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("cannot pack a vector of odd length {0} into complex symbols")]
    OddLength(usize),

    #[error("malformed IDX data in {path}: {reason}")]
    IdxFormat { path: String, reason: String },

    #[error("user {user} was scheduled with an empty battery")]
    EmptyBattery { user: usize },

    #[error("estimation system is rank-deficient; users never observed: {users:?}")]
    RankDeficient { users: Vec<usize> },

    #[error("iteration did not converge within {0} steps")]
    NoConvergence(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
}
