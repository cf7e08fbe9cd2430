use std::path::PathBuf;

use thiserror::Error;

/// Every failure the engine can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {0:e} is too small for cosine similarity")]
    ZeroNorm(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("non-finite gradient at row {row}")]
    NonFiniteGradient { row: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("training split is empty")]
    EmptySplit,

    #[error("user {0} has interacted with every item; no negatives available")]
    NoNegatives(usize),

    #[error("invalid parameter: {0}")]
    BadParam(String),

    #[error("degenerate synthetic spec: {0}")]
    DegenerateSpec(String),

    #[error("{kind} id {id} out of range (size {size})")]
    IdOutOfRange { kind: &'static str, id: usize, size: usize },

    #[error("probabilities do not form a distribution (sum = {0})")]
    BadDistribution(f64),

    #[error("user {0} has no candidate items to rank")]
    NoCandidates(usize),

    #[error("no user has relevant items in the evaluated split")]
    EmptyEval,

    #[error("empty sample: {0}")]
    EmptySample(&'static str),

    #[error("no planted false negatives available; fnrate needs a synthetic dataset with planted_fn.tsv")]
    EmptyFnList,

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerical blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::NonFiniteGradient { .. } | Error::ZeroNorm(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimMismatch { expected, got })
    }
}
