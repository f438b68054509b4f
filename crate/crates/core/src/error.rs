use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid clip schedule: {0}")]
    InvalidSchedule(String),

    #[error("empty input")]
    EmptyInput,

    #[error("clips mix identities: {0}")]
    MixedIdentity(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value: {0}")]
    NonFiniteValue(String),

    #[error("duplicate record for runner {runner_id} at RP{rp}")]
    DuplicateRecord { runner_id: String, rp: u32 },

    #[error("invalid identifier {0:?}: must be non-empty and free of ',', '=' and line breaks")]
    InvalidIdentifier(String),

    #[error("batch too small for train-mode batch norm: {0} rows (need at least 2)")]
    BatchTooSmall(usize),

    #[error("non-finite activation in {0}")]
    NonFiniteActivation(&'static str),

    #[error("forward cache does not match: {0}")]
    CacheMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("insufficient identities: {0}")]
    InsufficientIdentities(String),

    #[error("too few identities for {k} folds: have {have}")]
    TooFewIdentities { have: usize, k: usize },

    #[error("gallery is empty")]
    EmptyGallery,

    #[error("no relevant gallery entry for probe {0}")]
    NoRelevantInGallery(String),

    #[error("no queries to average")]
    NoQueries,

    #[error("missing ground truth for probe {0}")]
    MissingGroundTruth(String),

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("non-finite gradient at epoch {epoch}")]
    NonFiniteGradient { epoch: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
