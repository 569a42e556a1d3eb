use thiserror::Error;

use crate::net::Activation;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("matrix is not positive definite: pivot {pivot} failed at jitter {jitter:e}")]
    NotPositiveDefinite { pivot: usize, jitter: f64 },

    #[error("training diverged at epoch {epoch}: loss {loss:e} (initial {initial:e})")]
    Divergence { epoch: usize, loss: f64, initial: f64 },

    #[error("no closed-form infinite-width kernel for activation {0:?}")]
    UnsupportedActivation(Activation),

    #[error("degenerate candidate: schur complement {schur:e} <= threshold {threshold:e}")]
    DegenerateCandidate { schur: f64, threshold: f64 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Length { expected: usize, found: usize },

    #[error("inconsistent data: {0}")]
    Consistency(String),

    #[error("cycle {cycle}: {source}")]
    InCycle {
        cycle: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape { op, left, right }
    }

    pub(crate) fn in_cycle(self, cycle: usize) -> Self {
        Error::InCycle {
            cycle,
            source: Box::new(self),
        }
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self, Error::DegenerateCandidate { .. })
    }
}
