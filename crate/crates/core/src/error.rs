use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid knots: {0}")]
    InvalidKnots(String),
    #[error("x = {x} lies outside the basis domain [{lo}, {hi}]")]
    OutsideDomain { x: f64, lo: f64, hi: f64 },
    #[error("derivative order {order} exceeds spline degree {degree}")]
    DerivativeOrder { order: usize, degree: usize },
    #[error("penalty order {q} is not in 1..={m}")]
    PenaltyOrder { q: usize, m: usize },
    #[error("weight function is not positive at x = {0}")]
    NonpositiveWeight(f64),
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),
    #[error("empty sample")]
    EmptySample,
    #[error("dataset does not match model: {0}")]
    DatasetMismatch(String),
    #[error("coefficient vector has length {got}, expected {want}")]
    CoefficientLength { got: usize, want: usize },
    #[error("objective is not finite (divergence)")]
    Divergence,
    #[error("curvature is not available for the unsmoothed check loss")]
    NoCurvature,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("scenario regime check failed: {0}")]
    Regime(String),
    #[error("{failed} of {total} fits did not converge: {diagnostic}")]
    NonConverged {
        failed: usize,
        total: usize,
        diagnostic: String,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Whether the error reflects bad input rather than a numerical or I/O
    /// failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidKnots(_)
                | Error::OutsideDomain { .. }
                | Error::DerivativeOrder { .. }
                | Error::PenaltyOrder { .. }
                | Error::NonpositiveWeight(_)
                | Error::EmptySample
                | Error::DatasetMismatch(_)
                | Error::CoefficientLength { .. }
                | Error::InvalidParameter(_)
                | Error::Regime(_)
                | Error::Config(_)
                | Error::Parse { .. }
                | Error::Json(_)
        )
    }
}
