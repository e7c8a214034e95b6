use std::path::PathBuf;

use latentcf_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("degenerate statistics: {0}")]
    DegenerateStatistics(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("unsupported {what} version {found} (expected {expected})")]
    Version { what: &'static str, found: u32, expected: u32 },
    #[error("agent training failed: mean return {achieved:.3} below floor {floor:.3}")]
    AgentTraining {
        achieved: f64,
        floor: f64,
        /// Mean evaluation return after each evaluation round.
        curve: Vec<f64>,
    },
    #[error("model training diverged at epoch {epoch}: {reason}")]
    Divergence {
        epoch: usize,
        reason: String,
        last_good: Box<crate::jvae::JointVae>,
    },
    #[error("latent traversal failed at step {step}: {reason}")]
    Traversal {
        step: usize,
        reason: String,
        path: Vec<crate::jvae::LatentPoint>,
    },
    #[error("{artifact} has no run manifest (expected {manifest})")]
    MissingManifest { artifact: PathBuf, manifest: PathBuf },
    #[error("digest mismatch for {path}: manifest says {expected}, file is {found}")]
    DigestMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
