//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected_w}x{expected_h}, got {got_w}x{got_h}")]
    DimensionMismatch {
        expected_w: usize,
        expected_h: usize,
        got_w: usize,
        got_h: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("marker set is empty")]
    EmptyMarkers,

    #[error("marker ({x}, {y}) outside {w}x{h} image")]
    MarkerOutOfBounds { x: i64, y: i64, w: usize, h: usize },

    #[error("degenerate baseline: template equals reference but warped residual is nonzero")]
    DegenerateBaseline,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("correlation needs at least 3 rows, got {0}")]
    TooFewRows(usize),

    #[error("malformed {format}: {detail}")]
    Format { format: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn format(format: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            format: format.into(),
            detail: detail.into(),
        }
    }
}
