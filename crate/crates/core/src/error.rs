use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network sizing: {0}")]
    Sizing(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("environment error: {0}")]
    Env(String),

    #[error("invalid hyperparameter: {0}")]
    Hyperparam(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported snapshot version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("corrupt payload: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn mismatch(expected: usize, actual: usize, context: &'static str) -> Self {
        Error::DimensionMismatch {
            expected,
            actual,
            context,
        }
    }
}
