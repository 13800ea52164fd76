//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong, from malformed input files to numerical
/// breakdowns during fitting.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("column {column:?} not found in header")]
    MissingColumn { column: String },

    #[error("missing value at data row {row}, column {column:?}")]
    MissingValue { row: usize, column: String },

    #[error(
        "column {column:?} has non-numeric value {value:?} at data row {row}; \
         list it under `categorical` if it should be dummy-coded"
    )]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("treatment levels must cover 1..={t}; missing levels: {missing:?}")]
    MissingTreatmentLevel { t: usize, missing: Vec<usize> },

    #[error("treatment label {value:?} at data row {row} is not a positive integer")]
    BadTreatmentLabel { row: usize, value: String },

    #[error("covariate {column:?} has zero sample variance")]
    ZeroVariance { column: String },

    #[error("dataset is already standardized")]
    AlreadyStandardized,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("treatment arm {arm} has no units")]
    EmptyArm { arm: usize },

    #[error("non-finite score at unit {index}")]
    NonFiniteScore { index: usize },

    #[error("arm {arm} has {available} usable units but {needed} are required")]
    ArmTooSmall {
        arm: usize,
        needed: usize,
        available: usize,
    },

    #[error(
        "maximum-likelihood fit did not converge after {iterations} iterations \
         (gradient norm {grad_norm:.3e}); the data may be separable"
    )]
    NonConvergence {
        iterations: usize,
        grad_norm: f64,
        /// Last coefficient iterate, flattened level-major.
        last_beta: Vec<f64>,
    },

    #[error("information matrix is singular even after the ridge fallback")]
    SingularInformation,

    #[error("design matrix is rank deficient; collinear columns: {columns:?}")]
    RankDeficient { columns: Vec<String> },

    #[error("covariance matrix is ill-conditioned (condition estimate {cond:.3e})")]
    IllConditioned { cond: f64 },

    #[error("need at least {min} observations, got {got}")]
    TooFewObservations { min: usize, got: usize },

    #[error("all {0} candidate models failed to fit")]
    AllCandidatesFailed(usize),

    #[error(
        "arm {arm} accumulated only {got} of {needed} units before the draw budget was exhausted"
    )]
    DrawBudgetExhausted {
        arm: usize,
        needed: usize,
        got: usize,
    },

    #[error("{0} of {1} replicates failed; aborting the scenario")]
    TooManyFailures(usize, usize),

    #[error("config error: {0}")]
    Config(String),

    #[error("{0}")]
    InvalidInput(String),
}

impl Error {
    /// Process exit code for the CLI: 2 for validation problems (bad config,
    /// malformed data), 3 for numerical failures during estimation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_)
            | Error::Csv(_)
            | Error::MissingColumn { .. }
            | Error::MissingValue { .. }
            | Error::NonNumeric { .. }
            | Error::MissingTreatmentLevel { .. }
            | Error::BadTreatmentLabel { .. }
            | Error::ZeroVariance { .. }
            | Error::AlreadyStandardized
            | Error::DimensionMismatch { .. }
            | Error::Config(_)
            | Error::InvalidInput(_) => 2,
            Error::EmptyArm { .. }
            | Error::NonFiniteScore { .. }
            | Error::ArmTooSmall { .. }
            | Error::NonConvergence { .. }
            | Error::SingularInformation
            | Error::RankDeficient { .. }
            | Error::IllConditioned { .. }
            | Error::TooFewObservations { .. }
            | Error::AllCandidatesFailed(_)
            | Error::DrawBudgetExhausted { .. }
            | Error::TooManyFailures(_, _) => 3,
        }
    }
}
