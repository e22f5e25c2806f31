use thiserror::Error;

use crate::engine::RoundTrace;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("configuration error: dimension mismatch (expected {expected}, got {got})")]
    Dimension { expected: usize, got: usize },

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("task construction error: {0}")]
    TaskConstruction(String),

    #[error("policy error: {0}")]
    Policy(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("combining error: {0}")]
    Combining(String),

    #[error("channel error: {0}")]
    Channel(String),

    /// The run was aborted; `partial` holds every round completed before the abort.
    #[error("divergence at round {round}: {reason}")]
    Divergence {
        round: usize,
        reason: String,
        partial: Box<Vec<RoundTrace>>,
    },

    #[error("insufficient statistical power: {0}")]
    StatisticalPower(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}
