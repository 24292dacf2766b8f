// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module in the crate.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("zero-norm direction")]
    ZeroDirection,

    #[error("k must be positive")]
    ZeroK,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("vocabulary has no allowed token ids")]
    EmptyVocabulary,

    #[error("no language-specific features found")]
    NoSpecificFeatures,

    #[error("singular matrix")]
    Singular,

    #[error("rank deficient: needed rank {needed}, found {found}")]
    RankDeficient { needed: usize, found: usize },

    #[error("unknown language: {0}")]
    UnknownLanguage(String),

    #[error("missing field for intervention mode {mode}: {field}")]
    MissingField { mode: &'static str, field: &'static str },

    #[error("no sequence of length >= 2 to score")]
    NothingToScore,

    #[error("every sweep grid point failed")]
    SweepFailed,

    #[error("bad magic")]
    BadMagic,

    #[error("unsupported container version {0}")]
    VersionMismatch(u32),

    #[error("truncated payload")]
    Truncated,

    #[error("duplicate tensor name: {0}")]
    DuplicateName(String),

    #[error("malformed container: {0}")]
    Malformed(String),

    #[error("io error")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
        if expected == got {
            Ok(())
        } else {
            Err(Error::DimensionMismatch { expected, got })
        }
    }
}
