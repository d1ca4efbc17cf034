//! Error types shared across the solver modules.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    /// The coordinate map degenerated: min J fell at or below the floor.
    #[error("degenerate Jacobian: min J = {min_j:.6e} <= floor {floor:.6e}")]
    DegenerateJacobian { min_j: f64, floor: f64 },

    /// Density left the admissible corridor [rho_*/2, 3 rho^*/2].
    #[error("density out of range: [{min:.6e}, {max:.6e}] outside corridor [{lo:.6e}, {hi:.6e}]")]
    DensityOutOfRange { min: f64, max: f64, lo: f64, hi: f64 },

    /// A pressure-law root find left its positive bracket.
    #[error("equilibrium admissibility failure: {0}")]
    AdmissibilityFailure(String),

    /// Evaluation outside the positive working range (e.g. enthalpy at z <= 0).
    #[error("domain error: {0}")]
    DomainError(String),

    /// A linear solve failed to reach its tolerance.
    #[error("linear solve failure: {0}")]
    SolveFailure(String),

    /// An operation that needs a nonzero field got the zero field.
    #[error("zero field passed to {0}")]
    ZeroField(&'static str),

    /// Explicit step violated its CFL bound.
    #[error("CFL violation: {value:.4e} > {max:.4e}")]
    CflViolation { value: f64, max: f64 },

    /// Transport velocity failed boundary tangency before projection.
    #[error("boundary leak: |v.e3| = {leak:.4e} > tol {tol:.4e} at {location}")]
    BoundaryLeak { leak: f64, tol: f64, location: &'static str },

    /// A back-traced characteristic left its layer by more than the clamp threshold.
    #[error("characteristic escaped domain by {excess:.4e}")]
    EscapedDomain { excess: f64 },

    /// Picard iteration failed to converge within the allowed iterations.
    #[error("Picard stall: ratio {ratio:.4e} after {iters} iterations (tol {tol:.2e})")]
    PicardStall { iters: usize, ratio: f64, tol: f64 },

    /// Not enough stored time levels for the requested temporal difference.
    #[error("insufficient history: have {have}, need {need}")]
    InsufficientHistory { have: usize, need: usize },

    /// Sobolev order not representable on the grid.
    #[error("unsupported Sobolev order s = {0}")]
    UnsupportedOrder(f64),

    /// Vandermonde system rejected (bad nodes or numerically singular).
    #[error("Vandermonde failure: {0}")]
    Vandermonde(String),

    /// Config file parse error with location context.
    #[error("parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },

    /// Config value violates an invariant.
    #[error("invalid config `{key}`: {msg}")]
    ValidationError { key: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;
