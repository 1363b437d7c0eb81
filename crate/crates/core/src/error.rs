use thiserror::Error;

/// Errors produced by the simulation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("location {loc:?} lies outside a volume of dims {dims:?}")]
    OutOfBounds { loc: [usize; 3], dims: [usize; 3] },

    #[error("channel frequency {frequency} cpd is at or above the Nyquist limit {nyquist:.3} cpd")]
    AboveNyquist { frequency: f64, nyquist: f64 },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("malformed trace at line {line}: {reason}")]
    Trace { line: usize, reason: String },

    #[error("malformed dataset at line {line}: {reason}")]
    Dataset { line: usize, reason: String },

    #[error("contrast matching failed: {0}")]
    Matching(String),

    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
