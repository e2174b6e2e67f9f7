use std::path::PathBuf;

use thiserror::Error;

use crate::data::IdxError;
use crate::distributions::Family;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error("{op}: need at least {needed} samples, got {got}")]
    TooFewSamples {
        op: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("{op}: expected {expected:?} distributions, got {got:?}")]
    FamilyMismatch {
        op: &'static str,
        expected: Family,
        got: Family,
    },

    #[error("{op}: dimension mismatch ({lhs} vs {rhs})")]
    DimensionMismatch { op: &'static str, lhs: usize, rhs: usize },

    #[error("unknown output head {head} (model has {available})")]
    UnknownHead { head: usize, available: usize },

    #[error("tasks must arrive in order: expected task {expected}, got {got}")]
    TaskOutOfOrder { expected: usize, got: usize },

    #[error("non-finite gradient in parameter block `{0}`")]
    NonFiniteGradient(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("{0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
