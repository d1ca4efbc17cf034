//! Desk-scale simulator for two stacked layers of compressible, barotropic,
//! viscous fluid with a free top surface and a free internal interface.
//!
//! The moving domains are flattened onto the fixed equilibrium slab; the state
//! (u, q, eta) is advanced by an operator-split Picard scheme coupling a
//! two-phase Lame step for the velocity, a kappa-regularized (or purely
//! kinematic) update for the surfaces, and a semi-Lagrangian transport solve
//! for the density perturbation.  Energy and dissipation functionals are
//! evaluated as runtime diagnostics.

pub mod config;
pub mod diagnostics;
pub mod equilibrium;
pub mod error;
pub mod fields;
pub mod geometry;
pub mod lame;
pub mod runner;
pub mod snapshot;
pub mod spectral;
pub mod stepper;
pub mod surface;
pub mod transport;

pub use error::{Result, SimError};
