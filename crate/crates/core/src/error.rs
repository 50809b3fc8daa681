use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the estimation pipeline.
///
/// Variants that correspond to a documented reason code expose it through
/// [`Error::code`], which is what the CLI and the artifact logs print.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("series too short: need {needed} observations, got {got}")]
    SeriesTooShort { needed: usize, got: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient_points: need at least {needed}, got {got}")]
    InsufficientPoints { needed: usize, got: usize },

    #[error("no_convergence: best objective {best_objective:e} after {restarts} restarts")]
    NoConvergence {
        best_objective: f64,
        restarts: usize,
        best_params: Vec<f64>,
    },

    #[error("extrapolation_refused: target tenor {target} outside observed range [{min}, {max}]")]
    ExtrapolationRefused { target: f64, min: f64, max: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate_sample: {0}")]
    DegenerateSample(String),

    #[error("degenerate_premium: |denominator| = {0:e}")]
    DegeneratePremium(f64),

    #[error("missing bracket: {0}")]
    MissingBracket(String),

    #[error("too few strikes: need {needed}, got {got}")]
    TooFewStrikes { needed: usize, got: usize },

    #[error("zero standard deviation")]
    ZeroStd,

    #[error("degenerate groups: {0}")]
    DegenerateGroups(String),

    #[error("zero-variance feature at column {0}")]
    ZeroVarianceFeature(usize),

    #[error("empty cluster: {0}")]
    EmptyCluster(String),

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable reason code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::MalformedHeader(_) => "malformed_header",
            Error::SeriesTooShort { .. } => "series_too_short",
            Error::InvalidInput(_) => "invalid_input",
            Error::InsufficientPoints { .. } => "insufficient_points",
            Error::NoConvergence { .. } => "no_convergence",
            Error::ExtrapolationRefused { .. } => "extrapolation_refused",
            Error::GridMismatch(_) => "grid_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::DegenerateSample(_) => "degenerate_sample",
            Error::DegeneratePremium(_) => "degenerate_premium",
            Error::MissingBracket(_) => "missing_bracket",
            Error::TooFewStrikes { .. } => "too_few_strikes",
            Error::ZeroStd => "zero_std",
            Error::DegenerateGroups(_) => "degenerate_groups",
            Error::ZeroVarianceFeature(_) => "zero_variance_feature",
            Error::EmptyCluster(_) => "empty_cluster",
            Error::MissingPrerequisite(_) => "missing_prerequisite",
            Error::Validation(_) => "validation",
            Error::Csv(_) => "csv",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// Process exit code used by the pipeline CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingPrerequisite(_) => 2,
            Error::Validation(_)
            | Error::MalformedHeader(_)
            | Error::InvalidInput(_)
            | Error::Csv(_)
            | Error::Json(_) => 3,
            Error::Io(_) => 1,
            _ => 4,
        }
    }
}
