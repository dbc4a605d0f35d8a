use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed manifest at record {index:?}: {reason}")]
    MalformedManifest { index: Option<usize>, reason: String },

    #[error("missing image: {0}")]
    MissingImage(PathBuf),

    #[error("cannot decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("resize scale {scale} collapses height {height} below 8 px")]
    DegenerateScale { scale: f64, height: usize },

    #[error("jpeg quality {0} outside [1, 100]")]
    BadQuality(u32),

    #[error("band of fraction {fraction} over {height} rows has no rows")]
    DegenerateBand { fraction: f64, height: usize },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        actual: (usize, usize, usize),
    },

    #[error("malformed artifact field `{field}`: {reason}")]
    MalformedArtifact { field: String, reason: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("training did not converge: final train accuracy {accuracy:.4}")]
    NonConvergence { accuracy: f64, loss_trace: Vec<f64> },

    #[error("embedding row {index} is `{found}` but manifest record is `{expected}`")]
    Alignment {
        index: usize,
        expected: String,
        found: String,
    },

    #[error("detector `{0}` does not expose input gradients")]
    NonDifferentiableDetector(String),

    #[error("no per-image artifact for synthetic sample `{0}`")]
    MissingArtifact(String),

    #[error("metric requires both labels; only {0} present")]
    SingleClass(&'static str),

    #[error("bootstrap: {degenerate} of {attempts} resamples degenerate")]
    NonConvergentResampling { degenerate: usize, attempts: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
