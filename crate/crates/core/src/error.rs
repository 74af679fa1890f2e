use thiserror::Error;

/// Errors produced by model construction, fitting, and inference.
#[derive(Error, Debug)]
pub enum Error {
    #[error("degenerate domain: all {count} values equal {value}")]
    DegenerateDomain { value: f64, count: usize },

    #[error("empty value list")]
    EmptyValues,

    #[error("invalid knots: {0}")]
    InvalidKnots(String),

    #[error("difference matrix needs at least 2 columns, got {0}")]
    DifferenceTooSmall(usize),

    #[error("contrast of kind {kind} needs {requirement}, got K={k}, K_mod={k_mod}")]
    ContrastTooSmall {
        kind: &'static str,
        requirement: &'static str,
        k: usize,
        k_mod: usize,
    },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("missing column '{0}' in header")]
    MissingColumn(String),

    #[error("row {row}: non-numeric value '{value}' in column '{column}'")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("row {row}: negative observed time {value}")]
    NegativeTime { row: usize, value: f64 },

    #[error("row {row}: invalid cause code '{value}' (expected integer >= 0)")]
    InvalidCause { row: usize, value: String },

    #[error("row {row}: missing field in column '{column}'")]
    MissingField { row: usize, column: String },

    #[error("dataset has no records after validation")]
    EmptyDataset,

    #[error("negative tuning parameter {0}")]
    NegativeTuning(f64),

    #[error("no events of cause {0}")]
    NoEvents(usize),

    #[error("non-finite risk-set sum in stratum '{stratum}' at time {time}")]
    NonFiniteRiskSum { stratum: String, time: f64 },

    #[error("modified Hessian is not positive definite at iteration {iteration}")]
    SingularModifiedHessian { iteration: usize },

    #[error("line search exhausted {steps} steps at iteration {iteration} (eta_sq = {eta_sq:.3e})")]
    LineSearchExhausted {
        iteration: usize,
        steps: usize,
        eta_sq: f64,
    },

    #[error("penalized Hessian is singular (smallest eigenvalue {min_eigenvalue:.3e})")]
    SingularPenalizedHessian { min_eigenvalue: f64 },

    #[error("contrast covariance C*Omega*C' is singular")]
    SingularContrastCovariance,

    #[error("indefinite variance estimate: eigenvalue {0:.3e} below tolerance")]
    IndefiniteVariance(f64),

    #[error("quadratic-form tail integral did not reach accuracy {requested:.1e} (achieved {achieved:.1e})")]
    QuadformAccuracy { requested: f64, achieved: f64 },

    #[error("quadratic form needs at least one positive eigenvalue")]
    QuadformNoEigenvalues,

    #[error("fold partition infeasible: {0}; try fewer folds")]
    InfeasibleFolds(String),

    #[error("all grid points invalid in cross-validation")]
    AllGridPointsInvalid,

    #[error("root bracketing failed for subject {subject}: {detail}")]
    RootBracket { subject: usize, detail: String },

    #[error("deviance radicand {value:.3e} below tolerance for record {record}")]
    DevianceRadicand { record: usize, value: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
