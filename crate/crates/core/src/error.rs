use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("aspect ratio y = {y} outside ({lower}, {upper})")]
    AspectRatio { y: f64, lower: f64, upper: f64 },

    #[error("spectral parameter {0} is not in the resolvent domain (need Im z > 0, or real z > lambda_+)")]
    InvalidSpectralPoint(String),

    #[error("no Stieltjes branch found at z = {0}")]
    BranchSelection(String),

    #[error("subcritical spike: {0}")]
    Subcritical(String),

    #[error("spike separation violated: {0}")]
    Separation(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid direction: {0}")]
    InvalidDirection(String),

    #[error("infeasible cumulants (kappa3 = {kappa3}, kappa4 = {kappa4}): {reason}")]
    InfeasibleCumulants { kappa3: f64, kappa4: f64, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("eigensolver did not converge: {0}")]
    NoConvergence(String),

    #[error("singular resolvent: {0}")]
    Singular(String),

    #[error("contour check failed: {0}")]
    Contour(String),

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("merge of overlapping trial ranges: {0}")]
    Overlap(String),

    #[error("too many failed trials: {failed} of {total} ({reason})")]
    TrialBudget { failed: usize, total: usize, reason: String },

    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}
