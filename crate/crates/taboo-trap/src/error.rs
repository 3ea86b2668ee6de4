//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("{op}: output extent ({numerator} / {stride}) is not an integer")]
    NonIntegerOutput {
        op: &'static str,
        numerator: usize,
        stride: usize,
    },

    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("label {label} out of range [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("unknown IDX magic number {0:#010x}")]
    UnknownMagic(u32),

    #[error("truncated stream: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },

    #[error("batch size must be nonzero")]
    BatchSizeZero,

    #[error("batch size {batch} exceeds dataset size {available}")]
    BatchTooLarge { batch: usize, available: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("activation profile is empty")]
    EmptyProfile,

    #[error("percentile {0} out of range (0, 100]")]
    PercentileOutOfRange(f32),

    #[error("taboo key is not bound to a profile (no thresholds resolved)")]
    UnboundKey,

    #[error("invalid taboo key: {0}")]
    InvalidKey(String),

    #[error("checkpoint version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("training diverged: loss is not finite at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("experiment stage '{stage}' failed: {source}")]
    StageFailed {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::StageFailed {
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}
