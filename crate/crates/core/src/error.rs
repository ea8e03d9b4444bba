use thiserror::Error;

/// Errors produced anywhere in the quantization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("loss is not attached to the tape: no input requires a gradient")]
    Detached,

    #[error("non-finite value at coordinate {index} ({context})")]
    NonFinite { index: usize, context: String },

    #[error("no quantization parameters for layer `{layer}` cluster {cluster}")]
    MissingQuantParams { layer: String, cluster: usize },

    #[error("missing stored activation for layer `{layer}` at step {step}")]
    MissingActivation { layer: String, step: usize },

    #[error("calibration data has no records for cluster {0}")]
    MissingCluster(usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("training did not converge: final loss {loss} after {epochs} epochs (threshold {threshold})")]
    NonConvergence {
        loss: f64,
        epochs: usize,
        threshold: f64,
    },

    #[error(
        "non-finite loss in stage {stage} at step t={step}, batch {batch}: worst layer `{layer}`"
    )]
    NonFiniteLoss {
        stage: String,
        step: usize,
        batch: usize,
        layer: String,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {found} (this build reads up to {supported})")]
    Version { found: u16, supported: u16 },

    #[error("checkpoint was written under config hash {found:016x}, current config hashes to {expected:016x}")]
    ConfigMismatch { found: u64, expected: u64 },

    #[error("truncated or malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
