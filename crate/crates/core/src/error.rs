use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdcError {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },
    #[error("invalid dimensions {0:?}: every dimension must be at least 1")]
    ZeroDim(Vec<usize>),
    #[error("data length {len} does not match dimensions {dims:?}")]
    LengthMismatch { len: usize, dims: Vec<usize> },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("kernel size must be odd and at least 1, got {0}")]
    EvenKernel(usize),
    #[error("dilation rate must be positive, got {0}")]
    BadRate(f64),
    #[error("group count {groups} does not divide {channels} input channels")]
    BadGroups { groups: usize, channels: usize },
    #[error("sample coordinate is NaN")]
    NanCoordinate,
    #[error("backward requires a scalar loss node, got {0}")]
    NonScalarLoss(String),
    #[error("unknown node id {0}")]
    UnknownNode(usize),
    #[error("bad tensor file: {0}")]
    Format(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("fast path disagrees with naive path: max abs diff {0:e}")]
    FastPathMismatch(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AdcError>;
