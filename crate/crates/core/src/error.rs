use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("SVD did not converge after {iterations} iterations")]
    SvdNoConvergence { iterations: usize },

    #[error("matrix is numerically singular: singular value #{index} is {value:e}")]
    Singular { index: usize, value: f64 },

    #[error("Björck iteration left residual {residual:e} above tolerance {tolerance:e}")]
    BjorckResidual { residual: f64, tolerance: f64 },

    #[error("non-finite hidden state at step {step}")]
    Diverged { step: usize },

    #[error("hidden-state overflow at step {step}: pre-activation {value} exceeds alpha_h = {alpha_h}")]
    FxpOverflow { step: usize, value: f64, alpha_h: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
