use thiserror::Error;

use crate::corrector::SweepTable;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("point ({x}, {y}, {z}) lies outside the plate domain")]
    OutsideDomain { x: f64, y: f64, z: f64 },

    #[error("ball radius {radius} is under-resolved by spacing {spacing} (need r >= 2 * spacing)")]
    UnderResolved { radius: f64, spacing: f64 },

    #[error("every degree of freedom is constrained; the domain has no interior nodes")]
    DegenerateDomain,

    #[error("conjugate gradients did not converge: {iterations} iterations, relative residual {residual:.3e}")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("matrix is not positive definite (smallest eigenvalue {eigenvalue:.6e})")]
    NotPositiveDefinite { eigenvalue: f64 },

    #[error("bound violated: {0}")]
    BoundViolated(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("h-sweep aborted after {} rows: {source}", partial.rows.len())]
    SweepAborted {
        partial: Box<SweepTable>,
        #[source]
        source: Box<Error>,
    },

    #[error("line search failed to decrease the energy")]
    LineSearchFailed,

    #[error("iteration cap of {0} reached")]
    IterationCap(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter { name, reason: reason.into() }
}
