use thiserror::Error;

/// Errors raised by the observer toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum KklError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadTensor { shape: Vec<usize>, len: usize },
    #[error("leaf `{0}` is not bound")]
    UnboundLeaf(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("output must be scalar to take a gradient, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("integrator step size underflow at t = {t}")]
    StepSizeUnderflow { t: f64 },
    #[error("state escaped to a non-finite value at t = {t}")]
    Escape { t: f64 },
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty evaluation grid")]
    EmptyGrid,
    #[error("container format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
}

pub type Result<T, E = KklError> = std::result::Result<T, E>;
