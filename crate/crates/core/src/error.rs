use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("null space is empty: matrix has full row rank {0}")]
    EmptyNullSpace(usize),

    #[error("design matrix is rank deficient: {0}")]
    RankDeficientDesign(String),

    #[error("polytope is infeasible: {0}")]
    InfeasiblePolytope(String),

    #[error("weight matrix is numerically singular (smallest eigenvalue {0:e})")]
    SingularWeight(f64),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("optimizer did not converge after {iterations} iterations (projected gradient {gradient_norm:e})")]
    NonConvergence { iterations: usize, gradient_norm: f64 },

    #[error("no feasible starting point: {0}")]
    InfeasibleStart(String),

    #[error("degenerate spectrum at k = {k}: eigenvalues {lambda_k:e} and {lambda_next:e} tie")]
    DegenerateSpectrum { k: usize, lambda_k: f64, lambda_next: f64 },

    #[error("factor Gram matrix is singular")]
    SingularGram,

    #[error("bias-corrected loading Gram is not invertible (smallest eigenvalue {eigenvalue:e})")]
    BiasCorrectionSingular { eigenvalue: f64 },

    #[error("covariance matrix is singular: {0}")]
    SingularCovariance(String),

    #[error("unsupported tissue count {0}; only 3 tissues are supported")]
    UnsupportedTissueCount(usize),

    #[error("calibration failed: {0}")]
    CalibrationFailure(String),

    #[error("rank deficient input: {0}")]
    RankDeficient(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wrap the error with a location such as `fold 2, k 5` or `feature g17`.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, with all context layers stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures that come from numerical breakdown rather than bad
    /// configuration or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            Error::EmptyNullSpace(_)
                | Error::RankDeficientDesign(_)
                | Error::InfeasiblePolytope(_)
                | Error::SingularWeight(_)
                | Error::NotPositiveDefinite(_)
                | Error::NonConvergence { .. }
                | Error::InfeasibleStart(_)
                | Error::DegenerateSpectrum { .. }
                | Error::SingularGram
                | Error::BiasCorrectionSingular { .. }
                | Error::SingularCovariance(_)
                | Error::CalibrationFailure(_)
                | Error::RankDeficient(_)
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(self.root(), Error::Io { .. } | Error::Parse(_))
    }
}
