use thiserror::Error;

/// Errors surfaced by every public operation in this crate.
#[derive(Debug, Error)]
pub enum KanetError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value in {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("grid update needs at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("degenerate span for feature {feature}: max(x) == min(x); set margin > 0")]
    DegenerateSpan { feature: usize },

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("training aborted at epoch {epoch} step {step}: {msg}")]
    Training {
        epoch: usize,
        step: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, KanetError>;
