use thiserror::Error;

#[derive(Debug, Error)]
pub enum LrrnError {
    #[error("model must have at least one layer")]
    EmptyModel,

    #[error("layer {layer}: {detail}")]
    Dimension { layer: usize, detail: String },

    #[error("layer {layer}: invalid parameter: {detail}")]
    InvalidParameter { layer: usize, detail: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("inference diverged at sweep {sweep}: non-finite energy")]
    Diverged { sweep: usize },

    /// Wraps a per-sample failure; the message already includes the cause.
    #[error("sample {index}: {error}")]
    Sample { index: usize, error: Box<LrrnError> },

    #[error("activation state infeasible at layer {layer}, unit {unit}")]
    Infeasible { layer: usize, unit: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("idx: wrong magic 0x{found:08x} (expected 0x{expected:08x})")]
    WrongMagic { expected: u32, found: u32 },

    #[error("idx: truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("idx: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("dataset has no labels")]
    Unlabeled,

    #[error("pgm: {0}")]
    Pgm(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl LrrnError {
    pub(crate) fn dim(layer: usize, detail: impl Into<String>) -> Self {
        LrrnError::Dimension { layer, detail: detail.into() }
    }

    pub(crate) fn at_sample(self, index: usize) -> Self {
        LrrnError::Sample { index, error: Box::new(self) }
    }
}

pub type Result<T> = std::result::Result<T, LrrnError>;
