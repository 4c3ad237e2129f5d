use thiserror::Error;

/// Crate-wide error type. Every fallible operation funnels into one of
/// these variants so callers (CLI, bindings, tests) can map them onto
/// exit codes uniformly.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("degenerate input in {op}: {detail}")]
    DegenerateInput { op: &'static str, detail: String },

    #[error("empty region: statistics need at least one pixel")]
    EmptyRegion,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("loss must be a scalar node, got dims {0:?}")]
    NonScalarLoss((usize, usize, usize, usize)),

    #[error("numerical abort at epoch {epoch} step {step} (lr {lr}): {detail}")]
    NumericalAbort {
        epoch: usize,
        step: usize,
        lr: f64,
        detail: String,
        diagnostics: serde_json::Value,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub fn degenerate(op: &'static str, detail: impl Into<String>) -> Self {
        Error::DegenerateInput { op, detail: detail.into() }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
