use thiserror::Error;

use crate::{Key, Offset};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index is empty")]
    EmptyIndex,

    #[error("piece starting at offset {start} no longer matches the table of contents")]
    StalePiece { start: Offset },

    #[error("invalid bounds: low {low} must be strictly less than high {high}")]
    InvalidBounds { low: Key, high: Key },

    #[error("range ({low}, {high}) is not covered by the final partition")]
    UncoveredRange { low: Key, high: Key },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("column file length {0} is not a multiple of 8 bytes")]
    MalformedColumnFile(u64),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
