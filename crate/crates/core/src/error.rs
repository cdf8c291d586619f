use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KsdError {
    #[error("zero velocity")]
    ZeroVelocity,
    #[error("point outside domain")]
    OutsideDomain,
    #[error("bounds-only mode required")]
    BoundsOnlyMode,
    #[error("kernel diagonal singularity")]
    KernelDiagonal,
    #[error("degenerate collision: v = v*")]
    DegenerateCollision,
    #[error("no contraction at this domain size")]
    NoContraction,
    #[error("outside contraction regime")]
    OutsideContractionRegime,
    #[error("non-finite integrand at node {index} ({location})")]
    NonFinite { index: usize, location: String },
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("sampling failed: {0}")]
    Sampling(String),
}

pub type Result<T> = std::result::Result<T, KsdError>;
