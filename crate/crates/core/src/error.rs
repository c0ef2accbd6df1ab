use std::path::PathBuf;

use crate::linalg::RankReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("singular value decomposition did not converge")]
    NoConvergence,

    #[error(
        "rank deficient: numerical rank {} of required {required} (sigma_min/sigma_max = {:.3e})",
        report.numerical_rank,
        report.sigma_ratio()
    )]
    RankDeficient {
        required: usize,
        report: Box<RankReport>,
    },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("need at least {needed} samples with positive cost, have {have}")]
    InsufficientSamples { needed: usize, have: usize },

    #[error("{0} must be positive")]
    NonPositive(&'static str),

    #[error("flow {flow} is not admissible for K = {k}, QN = {qn}")]
    InadmissibleFlow { flow: String, k: usize, qn: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("configs do not share network, dataset and seed: {0}")]
    MismatchedConfigs(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: usize, got: usize) -> Self {
        Error::ShapeMismatch {
            context,
            expected,
            got,
        }
    }

    /// Rank report attached to a rank failure, if any.
    pub fn rank_report(&self) -> Option<&RankReport> {
        match self {
            Error::RankDeficient { report, .. } => Some(report),
            _ => None,
        }
    }
}
