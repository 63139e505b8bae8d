use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure categories of on-disk format readers.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes (expected {expected:?})")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("truncated input: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("malformed content: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("grid spec mismatch: {0}")]
    SpecMismatch(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate hull input: {0}")]
    DegenerateHull(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("loss undefined: no labelled cells")]
    UndefinedLoss,
    #[error("non-finite value during {0}")]
    NonFinite(String),
    #[error("infeasible parameters: {0}")]
    Infeasible(String),
    #[error("prediction contains Ignore at a labelled cell ({u}, {v})")]
    IgnoreInPrediction { u: usize, v: usize },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] io::Error),
}
