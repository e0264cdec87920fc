use std::path::PathBuf;

use thiserror::Error;

/// Every failure mode surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("prompt does not match the grammar: {0}")]
    Grammar(String),
    #[error("unknown object `{0}`")]
    UnknownObject(String),
    #[error("target set is empty")]
    EmptyTargets,
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error("invalid catalog entry on line {line}: {reason}")]
    CatalogParse { line: usize, reason: String },
    #[error("faithfulness must lie in (0, 1], got {0}")]
    InvalidFaithfulness(f64),
    #[error("step count must be at least 2, got {0}")]
    InvalidT(usize),
    #[error("timestep {t} outside the valid range [{lo}, {hi}]")]
    InvalidTimestep { t: usize, lo: usize, hi: usize },
    #[error("degenerate mixture variance {0:e} at the requested timestep")]
    DegenerateVariance(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no capture recorded for step {0}")]
    MissingCapture(usize),
    #[error("feature dimension mismatch: model expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training labels contain a single class")]
    DegenerateLabels,
    #[error("training loss became non-finite at epoch {0}")]
    NonFiniteLoss(usize),
    #[error("policy never accepts a generation (acceptance probability is zero)")]
    NeverAccepts,
    #[error("trial exceeded the restart cap of {0}")]
    TrialBudgetExceeded(u64),
    #[error("no report for t_last = {0}")]
    MissingReport(usize),
    #[error("run exceeded the restart limit of {0}")]
    RestartLimitExceeded(usize),
    #[error("invalid tensor file {path}: {reason}")]
    TensorFormat { path: PathBuf, reason: String },
    #[error("invalid model file: {0}")]
    ModelFormat(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("i/o error on {path}: {source}")]
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

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failing run.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. }
                | Error::NonFiniteLoss(_)
                | Error::TrialBudgetExceeded(_)
                | Error::RestartLimitExceeded(_)
                | Error::DegenerateVariance(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
