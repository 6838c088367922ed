use thiserror::Error;

use crate::chain::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty path")]
    EmptyPath,

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("state index {index} out of range for {n} states")]
    StateOutOfRange { index: usize, n: usize },

    #[error("invalid distribution: {0}")]
    InvalidDist(String),

    #[error("invalid chain: {}", .0.first().map(ToString::to_string).unwrap_or_default())]
    InvalidChain(Vec<Violation>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("linear program failed: {0}")]
    Lp(#[from] minilp::Error),

    #[error("solver did not converge: {0}")]
    NotConverged(String),
}
