use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("singular value iteration did not converge for {what} after {sweeps} sweeps")]
    NonConvergence { what: String, sweeps: usize },

    #[error("stable rank undefined for an all-zero matrix")]
    ZeroMatrix,

    #[error("token {token} at position {position} is outside the vocabulary of size {vocab}")]
    TokenOutOfRange { position: usize, token: u32, vocab: usize },

    #[error("sequence of length {len} exceeds seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("in calibration sequence {index}: {source}")]
    Sequence {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("corpus too small: need at least {required} bytes, have {available}")]
    CorpusTooSmall { required: usize, available: usize },

    #[error("criterion {criterion} needs calibration statistics: {missing}")]
    MissingStats { criterion: &'static str, missing: &'static str },

    #[error("selection invalid: {0}")]
    Selection(String),

    #[error("pruning invalid: {0}")]
    Pruning(String),

    #[error("non-finite training loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("finetune diverged in round {round}: {source}")]
    RoundDiverged {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("evaluation split overlaps data used for {purpose}")]
    SplitOverlap { purpose: String },

    #[error("unknown criterion `{0}`")]
    UnknownCriterion(String),

    #[error("bad magic bytes, not a container file")]
    BadMagic,

    #[error("unsupported container version {found} (this build reads {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },

    #[error("digest mismatch: stored {stored}, computed {computed}")]
    DigestMismatch { stored: String, computed: String },

    #[error("malformed container: {0}")]
    Malformed(String),

    #[error("truncated container: {0}")]
    Truncated(&'static str),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig { field, reason: reason.into() }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::NonFinite { .. }
            | Error::NonConvergence { .. }
            | Error::NonFiniteLoss { .. } => ErrorClass::Numerical,
            Error::RoundDiverged { source, .. } | Error::Sequence { source, .. } => source.class(),
            Error::Io { .. } => ErrorClass::Io,
            _ => ErrorClass::Validation,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
