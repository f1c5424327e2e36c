//! Crate-wide error type.

use crate::flow::Trajectory;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {context} (expected {expected}, got {got})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("Randers data is not strongly convex: |b|_g = {norm_b} >= 1")]
    InvalidRanders { norm_b: f64 },

    #[error("momentum lies on the singular set of the Kropina dual (|b.p| = {pairing:.3e})")]
    SingularMomentum { pairing: f64 },

    #[error("singular matrix in {context} (|det| = {det:.3e})")]
    SingularMatrix { context: &'static str, det: f64 },

    #[error("regularity failure: {0}")]
    Regularity(String),

    #[error("integration diverged at t = {t_last}: {cause}")]
    IntegrationDiverged {
        t_last: f64,
        cause: String,
        partial: Box<Trajectory>,
    },

    #[error("trajectory would exceed the sample cap of {cap} steps")]
    TooManySamples { cap: usize },

    #[error("cannot normalize state with H = {energy} to the 1/2 level")]
    Normalization { energy: f64 },

    #[error("non-quadratic cost is not differentiable at u = 0")]
    ZeroFiberVector,

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("unknown parameter `{0}` for scenario `{1}`")]
    UnknownParameter(String, String),

    #[error("parameter out of domain: {0}")]
    ParameterDomain(String),

    #[error("scenario has no closed-form oracle for these parameters")]
    NoOracle,

    #[error("t = {t} outside the oracle's monotone domain [{lo}, {hi}]")]
    OutsideOracleDomain { t: f64, lo: f64, hi: f64 },

    #[error("path too short: {got} samples, need at least {need}")]
    PathTooShort { need: usize, got: usize },

    #[error("degenerate Poisson bivector (|det pi| = {det:.3e})")]
    DegenerateBivector { det: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    /// True for errors arising from bad user input rather than numerics.
    pub fn is_configuration(&self) -> bool {
        matches!(
            self,
            Error::DimensionMismatch { .. }
                | Error::UnknownScenario(_)
                | Error::UnknownParameter(..)
                | Error::ParameterDomain(_)
                | Error::NoOracle
                | Error::Config(_)
        )
    }
}
