use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("need at least {needed} maps for differencing, got {got}")]
    TooFewEpochs { needed: usize, got: usize },

    #[error("epoch {epoch} has {snapshots} snapshots but the model has only {objects} objects")]
    TooManySnapshots {
        epoch: usize,
        snapshots: usize,
        objects: usize,
    },

    #[error("epoch {epoch}: {terms} injective assignments exceed the enumeration cap of {cap}")]
    EnumerationLimit { epoch: usize, terms: u128, cap: u64 },

    #[error("dataset contains no snapshots")]
    EmptyDataset,

    #[error("could not place objects for epoch {epoch} after {attempts} attempts")]
    PlacementInfeasible { epoch: usize, attempts: usize },

    #[error("{step} failed at iteration {iteration}: {source}")]
    Em {
        step: &'static str,
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed PGM {path:?}: {reason}")]
    Pgm { path: PathBuf, reason: String },

    #[error("{path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path:?}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("PNG encoding failed for {path:?}: {reason}")]
    Png { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_step(self, step: &'static str, iteration: usize) -> Self {
        Error::Em {
            step,
            iteration,
            source: Box::new(self),
        }
    }
}
