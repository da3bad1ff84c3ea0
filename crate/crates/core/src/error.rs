use std::path::PathBuf;

use thiserror::Error;

use crate::store::SiteId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest: {0}")]
    MalformedManifest(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("ambient dimension mismatch for {site}: {expected} vs {found}")]
    AmbientDimMismatch {
        site: SiteId,
        expected: usize,
        found: usize,
    },

    #[error("no site is shared by every bundle")]
    EmptyIntersection,

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("coefficient rank mismatch: A side has {a}, B side has {b}")]
    RankMismatch { a: usize, b: usize },

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("centered stack is numerically zero for every site")]
    DegenerateStack,

    #[error("pseudo-component augmentation exhausted after {retries} retries (accepted {accepted})")]
    AugmentationExhausted { accepted: usize, retries: usize },

    #[error("subspace hash mismatch: coefficients reference {expected}, subspace is {found}")]
    SubspaceHashMismatch { expected: String, found: String },

    #[error("training diverged at epoch {epoch}: loss {loss:e} exceeds {limit:e}")]
    Diverged {
        epoch: usize,
        loss: f64,
        limit: f64,
        trace: Box<crate::adapt::LossTrace>,
    },

    #[error("infeasible domain spec: {0}")]
    SpecInfeasible(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateStack | Error::AugmentationExhausted { .. } | Error::Diverged { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
