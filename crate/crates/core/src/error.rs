use thiserror::Error;

/// Every failure the estimation stack can report.
///
/// `kind()` gives the stable machine-readable name used in CLI error objects.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeeError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix is not positive definite (lambda_min = {lambda_min:e})")]
    NotPositiveDefinite { lambda_min: f64 },

    #[error("design is singular at the current parameter (lambda_min(H) = {lambda_min:e})")]
    SingularDesign { lambda_min: f64 },

    #[error("link overflow at theta = {theta} (subject {subject:?}, time {time:?})")]
    Overflow {
        theta: f64,
        subject: Option<usize>,
        time: Option<usize>,
    },

    #[error("link overflow at theta = {theta} while probing beta = {probe:?}")]
    ProbeOverflow { theta: f64, probe: Vec<f64> },

    #[error("step halving exhausted at iteration {iteration}")]
    LineSearchFailure { iteration: usize },

    #[error("degenerate variance {value:e} at subject {subject}, time {time}")]
    DegenerateVariance {
        subject: usize,
        time: usize,
        value: f64,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no successful replicates to aggregate")]
    EmptyReport,
}

impl GeeError {
    pub fn kind(&self) -> &'static str {
        match self {
            GeeError::InvalidInput(_) => "invalid-input",
            GeeError::NotPositiveDefinite { .. } => "not-positive-definite",
            GeeError::SingularDesign { .. } => "singular-design",
            GeeError::Overflow { .. } | GeeError::ProbeOverflow { .. } => "overflow",
            GeeError::LineSearchFailure { .. } => "line-search-failure",
            GeeError::DegenerateVariance { .. } => "degenerate-variance",
            GeeError::Shape(_) => "shape",
            GeeError::Precondition(_) => "precondition",
            GeeError::Config(_) => "config",
            GeeError::EmptyReport => "empty-report",
        }
    }
}

pub type Result<T> = std::result::Result<T, GeeError>;
