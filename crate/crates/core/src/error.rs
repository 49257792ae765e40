use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failures raised by the numerical core.
///
/// Data-shape problems and numerical breakdowns are kept apart so the CLI
/// can map them to distinct exit codes (see [`Error::is_numerical`]).
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not positive definite: eigenvalue #{index} = {value:e}")]
    NotPositiveDefinite { index: usize, value: f64 },

    #[error("matrix is not symmetric: max |M - M^T| = {asymmetry:e} (scale {scale:e})")]
    NotSymmetric { asymmetry: f64, scale: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },

    #[error("invalid factor dimensions: {0}")]
    InvalidDims(String),

    #[error("invalid panel: {0}")]
    InvalidPanel(String),

    #[error(
        "sample covariance is singular: smallest eigenvalue {min_eig:e} <= floor {floor:e}; \
         consider a ridge of {suggested_ridge:e} * I"
    )]
    SingularCovariance {
        min_eig: f64,
        floor: f64,
        suggested_ridge: f64,
    },

    #[error("normal equations are singular: rank {rank} < {params} parameters")]
    SingularNormalEquations { rank: usize, params: usize },

    #[error("expected Hessian is not positive definite: smallest eigenvalue {min_eig:e}")]
    HessianNotPd { min_eig: f64 },

    #[error("model is not over-identified (df = 0)")]
    NotOveridentified,

    #[error("contrast matrix is rank deficient or A'JA is singular")]
    RankDeficientContrast,

    #[error("unsupported factor dimension {dim} for 2x2 shrinkage (factor #{factor}); use renormalize")]
    UnsupportedFactorDim { factor: usize, dim: usize },

    #[error("non-positive diagonal entry #{index} = {value:e}")]
    NonPositiveDiagonal { index: usize, value: f64 },

    #[error("Jacobi eigensolver did not converge after {sweeps} sweeps (off-diagonal mass {off:e})")]
    EigenNoConvergence { sweeps: usize, off: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    /// True for failures of the numerics (as opposed to malformed inputs).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::SingularCovariance { .. }
                | Error::SingularNormalEquations { .. }
                | Error::HessianNotPd { .. }
                | Error::NotOveridentified
                | Error::RankDeficientContrast
                | Error::EigenNoConvergence { .. }
        )
    }

    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NotPositiveDefinite { .. } => "NotPositiveDefinite",
            Error::NotSymmetric { .. } => "NotSymmetric",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::InvalidDims(_) => "InvalidDims",
            Error::InvalidPanel(_) => "InvalidPanel",
            Error::SingularCovariance { .. } => "SingularCovariance",
            Error::SingularNormalEquations { .. } => "SingularNormalEquations",
            Error::HessianNotPd { .. } => "HessianNotPd",
            Error::NotOveridentified => "NotOveridentified",
            Error::RankDeficientContrast => "RankDeficientContrast",
            Error::UnsupportedFactorDim { .. } => "UnsupportedFactorDim",
            Error::NonPositiveDiagonal { .. } => "NonPositiveDiagonal",
            Error::EigenNoConvergence { .. } => "EigenNoConvergence",
            Error::InvalidConfig(_) => "InvalidConfig",
        }
    }
}

pub(crate) fn dim_mismatch(expected: impl ToString, found: impl ToString) -> Error {
    Error::DimensionMismatch {
        expected: expected.to_string(),
        found: found.to_string(),
    }
}
