use crate::autodiff::AdError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error("invalid region graph: {0}")]
    InvalidGraph(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no path from region {from} to region {to}")]
    Disconnected { from: usize, to: usize },
    #[error("state became non-finite at step {step}")]
    NonFiniteState { step: usize },
    #[error("non-finite loss at step {step}: {source}")]
    NonFiniteLoss { step: usize, source: AdError },
    #[error("training diverged at epoch {epoch}: loss {loss:.6e} vs initial {initial:.6e}")]
    Diverged {
        epoch: usize,
        loss: f64,
        initial: f64,
    },
    #[error("policy was trained for topology {expected}, scenario has {found}")]
    TopologyMismatch { expected: String, found: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad inputs rather than numerical failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidGraph(_)
                | Error::InvalidConfig(_)
                | Error::Disconnected { .. }
                | Error::TopologyMismatch { .. }
                | Error::Parse(_)
                | Error::Io(_)
        )
    }
}
