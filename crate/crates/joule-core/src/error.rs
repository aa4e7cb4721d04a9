use crate::sampler::ChainTrace;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{context}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{context}: non-finite value encountered")]
    NonFinite { context: &'static str },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    /// A Langevin chain produced a non-finite state or energy. Carries the
    /// partial trace accumulated up to the failing step.
    #[error("chain diverged at step {step}")]
    ChainDiverged { step: u64, trace: Box<ChainTrace> },

    #[error("class {class} has {count} sample(s); fitting needs at least 2")]
    ClassTooSmall { class: usize, count: usize },

    #[error("covariance for class {class} not positive definite after {attempts} jitter escalations")]
    NotPositiveDefinite { class: usize, attempts: u32 },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} unsupported (this build reads version {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
