use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid support: lower bound {a} must be below upper bound {b}")]
    InvalidSupport { a: f64, b: f64 },
    #[error("grid needs at least {min} points, got {n}")]
    GridTooSmall { n: usize, min: usize },
    #[error("functions or operators live on different grids")]
    GridMismatch,
    #[error("value at index {index} is not finite")]
    NonFinite { index: usize },
    #[error("kernel is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("operator is not positive semidefinite (eigenvalue {eigenvalue:e})")]
    NonPsd { eigenvalue: f64 },
    #[error("density takes negative value {value:e} at index {index}")]
    NegativeDensity { index: usize, value: f64 },
    #[error("too few observations: need {needed}, got {got}")]
    TooFewObservations { needed: usize, got: usize },
    #[error("sample is degenerate: {0}")]
    DegenerateSample(String),
    #[error("bandwidth must be positive, got {0}")]
    BandwidthNonpositive(f64),
    #[error("panel is empty")]
    EmptyPanel,
    #[error("too few periods: need {needed}, got {got}")]
    TooFewPeriods { needed: usize, got: usize },
    #[error("rank deficient: eigenvalue {k} is {lambda_k:e} against leading {lambda_1:e}")]
    RankDeficient { k: usize, lambda_k: f64, lambda_1: f64 },
    #[error("no residuals supplied")]
    EmptyResiduals,
    #[error("threshold {tau} lies outside the support [{a}, {b}]")]
    ThresholdOutOfSupport { tau: f64, a: f64, b: f64 },
    #[error("moment basis degenerates at order {k}: Q is too low-rank")]
    DegenerateMetric { k: usize },
    #[error("functional has (near) zero variance ({variance:e})")]
    ZeroVariance { variance: f64 },
    #[error("forecast collapses after clipping (mass {mass:e})")]
    DegenerateForecast { mass: f64 },
    #[error("no candidate truncation level is feasible")]
    NoFeasibleK,
    #[error("too few residuals: need {needed}, got {got}")]
    TooFewResiduals { needed: usize, got: usize },
    #[error("density is degenerate: {0}")]
    DegenerateDensity(String),
    #[error("generator is unstable: state norm reached {norm:e} at step {step}")]
    UnstableGenerator { step: usize, norm: f64 },
    #[error("{dropped} of {total} replications failed, above the {limit_pct}% limit")]
    TooManyDropped { dropped: usize, total: usize, limit_pct: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("period {label}: {source}")]
    Period { label: String, source: Box<Error> },
    #[error("{path}:{line}:{column}: {reason}")]
    Parse { path: PathBuf, line: usize, column: usize, reason: String },
    #[error("{0}: file is empty")]
    EmptyFile(PathBuf),
    #[error("malformed model file at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Wraps an error with the label of the period that produced it.
    pub fn in_period(self, label: &str) -> Self {
        Error::Period { label: label.to_string(), source: Box::new(self) }
    }

    /// True for errors caused by bad inputs rather than by the computation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Period { source, .. } => source.is_validation(),
            Error::InvalidSupport { .. }
            | Error::GridTooSmall { .. }
            | Error::GridMismatch
            | Error::NonFinite { .. }
            | Error::NegativeDensity { .. }
            | Error::TooFewObservations { .. }
            | Error::BandwidthNonpositive(_)
            | Error::EmptyPanel
            | Error::TooFewPeriods { .. }
            | Error::ThresholdOutOfSupport { .. }
            | Error::TooFewResiduals { .. }
            | Error::InvalidArgument(_)
            | Error::Parse { .. }
            | Error::EmptyFile(_)
            | Error::Format { .. } => true,
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            _ => false,
        }
    }
}
