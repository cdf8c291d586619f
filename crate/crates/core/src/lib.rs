//! Stationary Boltzmann equation with incoming boundary data on small convex
//! domains.
//!
//! The crate builds the constructive solution `f = sum_i (S K)^i (Jg + S phi)`
//! for the linearized problem, the outer iteration for the nonlinear one, and
//! sampled checks of the geometric and kernel estimates the construction
//! relies on.

pub mod collision;
pub mod envelope;
pub mod error;
pub mod geometry;
pub mod kernel;
pub mod norms;
pub mod quadrature;
pub mod report;
pub mod sampling;
pub mod solver;
pub mod transport;

pub use error::{KsdError, Result};
pub use geometry::{DomainKind, DomainSpec, RayTrace};
pub use kernel::{CrossSection, KernelParams};
pub use norms::NormConfig;
pub use quadrature::{SphereRule, VelocityRule};
pub use report::{Check, CheckKind, Report};
pub use solver::{IterationHistory, SolverConfig};
pub use transport::{BoundaryData, BoundaryFamily, Field, GridConfig, PhaseGrid};

/// Velocities and positions.
pub type Vec3 = nalgebra::Vector3<f64>;
