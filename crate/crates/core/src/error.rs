use thiserror::Error;

/// Errors produced across the crate.
#[derive(Debug, Error)]
pub enum CapiError {
    #[error("invalid mask spec: {0}")]
    InvalidSpec(String),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("insufficient prediction targets: requested {requested}, only {available} masked")]
    InsufficientTargets { requested: usize, available: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("non-finite values: {0}")]
    NonFinite(String),
    #[error("step {step} out of range [0, {total}]")]
    StepOutOfRange { step: usize, total: usize },
    #[error(
        "non-finite loss at step {step}: mim_loss={mim_loss}, cluster_loss={cluster_loss}, max|logit|={max_abs_logit}"
    )]
    Diverged {
        step: usize,
        mim_loss: f64,
        cluster_loss: f64,
        max_abs_logit: f64,
    },
    #[error("archive: {0}")]
    Archive(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("plot: {0}")]
    Plot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, CapiError>;
