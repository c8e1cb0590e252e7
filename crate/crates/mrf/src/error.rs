//! Error type shared across the pipeline.
//!
//! Each variant carries a stable `category()` string; the CLI prints it as
//! a one-line machine-readable prefix and maps the whole family to exit
//! code 1. Shape violations inside tensor/tape kernels are programming
//! errors and panic instead.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint manifest/blob mismatch: {0}")]
    CheckpointCorrupt(String),

    #[error("checkpoint is frozen; parameter mutation rejected")]
    CheckpointFrozen,

    #[error("checkpoint must be frozen for key collection")]
    CheckpointNotFrozen,

    #[error("unknown tensor name '{0}' in checkpoint")]
    UnknownTensor(String),

    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("sequence length {len} exceeds model maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("greedy pairing requires an even item count, got {0}")]
    OddItemCount(usize),

    #[error("greedy pairing rejects zero vectors (item {0})")]
    ZeroVector(usize),

    #[error("router bank / checkpoint mismatch: {0}")]
    BankMismatch(String),

    #[error("router kind mismatch: checkpoint carries {found}, requested {requested}")]
    RouterKindMismatch { found: String, requested: String },

    #[error("non-finite loss at step {step} (lm={lm}, aux={aux}, z={z})")]
    NanLoss { step: u64, lm: f64, aux: f64, z: f64 },

    #[error("step-grid mismatch: {0}")]
    StepGridMismatch(String),

    #[error("metrics log {path}: {msg}")]
    BadMetricsLog { path: PathBuf, msg: String },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Stable one-token-ish category for machine-readable CLI errors.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Config(_) => "config",
            Error::CheckpointVersion { .. } => "checkpoint-version",
            Error::CheckpointCorrupt(_) => "checkpoint-corrupt",
            Error::CheckpointFrozen => "checkpoint-frozen",
            Error::CheckpointNotFrozen => "checkpoint-not-frozen",
            Error::UnknownTensor(_) => "unknown-tensor",
            Error::TokenOutOfRange { .. } => "token-out-of-range",
            Error::SequenceTooLong { .. } => "sequence-too-long",
            Error::Corpus(_) => "corpus",
            Error::OddItemCount(_) => "odd-item-count",
            Error::ZeroVector(_) => "zero-vector",
            Error::BankMismatch(_) => "bank-mismatch",
            Error::RouterKindMismatch { .. } => "router-kind-mismatch",
            Error::NanLoss { .. } => "nan-loss",
            Error::StepGridMismatch(_) => "step-grid mismatch",
            Error::BadMetricsLog { .. } => "bad-metrics-log",
            Error::Invalid(_) => "invalid",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
