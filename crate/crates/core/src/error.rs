use alloc::string::String;

/// Errors raised by the engine and the training stages.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch between {left} ({left_dim}) and {right} ({right_dim})")]
    DimensionMismatch {
        left: String,
        left_dim: usize,
        right: String,
        right_dim: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("module `{0}` must be frozen")]
    NotFrozen(String),
    #[error("module `{0}` is frozen and cannot be updated")]
    Frozen(String),
    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("too few samples: {0}")]
    TooFewSamples(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(
        "non-finite loss in phase {phase} at epoch {epoch}, batch {batch} \
         (ce={ce}, kl={kl}, mmd={mmd})"
    )]
    NonFiniteLoss {
        phase: String,
        epoch: usize,
        batch: usize,
        ce: f64,
        kl: f64,
        mmd: f64,
    },
}

pub type Result<T> = core::result::Result<T, Error>;
