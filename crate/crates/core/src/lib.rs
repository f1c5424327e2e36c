//! Numerical Lie algebroid geometry for driftless optimal control.
//!
//! The crate models Lie algebroids over regions of `R^n` in local
//! coordinates, builds the Legendre-dual Hamiltonians of quadratic, Randers
//! and degenerate (Kropina-type) fiber costs, integrates the resulting
//! Pontryagin/Hamilton equations with fixed-step RK4, and evaluates the
//! connection-theoretic diagnostic tensors (semisprays, nonlinear
//! connections, curvature, torsion, metric compatibility, Jacobi
//! endomorphism, dual connections) attached to those dynamics. A registry of
//! worked sub-Riemannian systems with closed-form geodesics ties everything
//! to ground truth.

pub mod algebroid;
pub mod connections;
pub mod costs;
pub mod error;
pub mod flow;
pub mod numeric;
pub mod poisson;
pub mod scenarios;

pub use algebroid::{AnchorField, AxiomReport, LieAlgebroid, ScalarField, StructureField};
pub use costs::{Cost, CovectorField, DualHamiltonian, MetricField};
pub use error::{Error, Result};
pub use flow::{HamiltonianSystem, PhaseState, Trajectory};
pub use numeric::SampleBox;
pub use scenarios::Scenario;
