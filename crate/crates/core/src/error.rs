use thiserror::Error;

/// Errors raised anywhere in the solver pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Input or configuration rejected before any numerical work.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// No time-register size satisfies the step-size band and the smoothing bound.
    #[error("infeasible grid scale: {0}")]
    InfeasibleScale(String),

    /// A dense operator was requested above the configured dimension cap.
    #[error("dimension {dim} exceeds dense cap {cap}")]
    DimensionCap { dim: usize, cap: usize },

    /// Operands of incompatible shape.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A factor scheduled for inversion has an eigenvalue below the floor.
    #[error("singular factor: {0}")]
    Singular(String),

    /// Phase estimation window too short for the largest phase.
    #[error("phase aliasing: {0}")]
    Aliasing(String),

    /// An iterative method failed to reach its tolerance.
    #[error("no convergence: {0}")]
    NoConvergence(String),

    /// Two interpolation nodes snapped to the same grid point.
    #[error("node collision: {0}")]
    NodeCollision(String),

    /// Interpolation matrix too ill-conditioned.
    #[error("ill-conditioned fit: {0}")]
    IllConditioned(String),

    /// Point outside an operator's or interpolant's domain.
    #[error("out of domain: {0}")]
    OutOfDomain(String),

    /// Numerical blow-up detected.
    #[error("unstable: {0}")]
    Unstable(String),

    /// A pipeline stage failed; wraps the underlying error.
    #[error("stage {stage} failed: {source}")]
    Stage { stage: String, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by invalid user input rather than numerics.
    pub fn is_validation(&self) -> bool {
        if let Error::Stage { source, .. } = self {
            return source.is_validation();
        }
        matches!(self, Error::Invalid(_) | Error::InfeasibleScale(_) | Error::DimensionCap { .. } | Error::Json(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
