use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// The Riesz constant has a pole at `alpha == dim`; space-time white
    /// noise must go through the delta-correlated branch instead.
    #[error("alpha = dim = {dim}: white noise has no Riesz constant, use the delta-correlated branch")]
    WhiteNoiseCase { dim: usize },

    #[error("{what} = {value} is outside its domain ({domain})")]
    Domain {
        what: &'static str,
        value: f64,
        domain: &'static str,
    },

    #[error("quadrature did not converge: estimate {estimate}, error estimate {abs_error:e} > tolerance {tolerance:e}")]
    Quadrature {
        estimate: f64,
        abs_error: f64,
        tolerance: f64,
    },

    #[error("negative conditional variance w[{index}] = {value}")]
    NegativeWeight { index: usize, value: f64 },

    #[error("joint covariance for shift r = {shift} is not positive semidefinite after jitter")]
    InvalidShift { shift: usize },

    #[error("Monte Carlo standard error {std_error:e} exceeds requested tolerance {tolerance:e}")]
    MonteCarloTolerance { std_error: f64, tolerance: f64 },

    #[error("circulant embedding has eigenvalue {min_eigenvalue:e} below -1e-10 (embedding size {size})")]
    EmbeddingFailure { min_eigenvalue: f64, size: usize },

    #[error("numerical blow-up at micro-step {step}: |u| = {value:e} exceeds cap {cap:e}")]
    NumericalBlowup { step: usize, value: f64, cap: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid sampling design: {0}")]
    InvalidDesign(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid evaluation function: {0}")]
    InvalidFunction(String),

    #[error("time {t} exceeds the observation horizon {horizon}")]
    BeyondHorizon { t: f64, horizon: f64 },

    #[error("degenerate path: {0}")]
    DegeneratePath(String),

    #[error("quadratic-variation ratio {ratio} is inconsistent with a rough path of order (0, 1]")]
    InconsistentScaling { ratio: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("need at least {needed} lags, got {got}")]
    TooFewLags { needed: usize, got: usize },

    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn ensure_finite(what: &str, x: f64) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite(format!("{what} = {x}")))
    }
}
