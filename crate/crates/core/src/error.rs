use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("no loss positions: the inclusion mask selects nothing")]
    NoLossPositions,

    #[error("non-deterministic function: {0}")]
    Determinism(String),

    #[error("wrong model mode: {0}")]
    Mode(String),

    #[error("degenerate dimension {dim}: min == max == {value}")]
    DegenerateDimension { dim: usize, value: f64 },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// True for errors caused by the caller's inputs or configuration rather
    /// than by a failure during the run itself.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Mode(_)
                | Error::Shape(_)
                | Error::Data(_)
                | Error::Checkpoint(_)
                | Error::Io(_)
                | Error::Csv(_)
                | Error::Json(_)
                | Error::DegenerateDimension { .. }
        )
    }
}
