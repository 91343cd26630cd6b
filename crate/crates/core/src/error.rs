use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("shape mismatch at layer {layer}: {detail}")]
    Shape { layer: usize, detail: String },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("non-finite loss in batch {batch}")]
    NonFiniteLoss { batch: usize },

    #[error("training diverged after epoch {last_finite_epoch:?}")]
    Diverged { last_finite_epoch: Option<usize> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("weight magnitude {value} at layer {layer} exceeds representable scale {w_max}")]
    WeightOutOfRange { layer: usize, value: f64, w_max: f64 },

    #[error("binarized partial-sum sensing requires a reference vector")]
    MissingReference,

    #[error("non-finite KL divergence")]
    NonFiniteKl,

    #[error("did not converge: {0}")]
    NotConverged(String),

    #[error("fingerprint capacity exceeded: accuracy gap {gap:.2} points")]
    FingerprintCapacity { gap: f64 },

    #[error("k = {k} exceeds dataset size {n}")]
    RankOutOfRange { k: usize, n: usize },

    #[error("{context} at byte offset {offset}")]
    Format { context: String, offset: usize },

    #[error("parse error on line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
