//! Stochastic simulator and verification harness for real-ensemble dynamics.
//!
//! A finite ensemble of `N` systems, each carrying a beable value
//! `a in 1..P` and a phase angle, evolves by two rules: a stochastic copy
//! process in which one member's pair is written onto another at a rate
//! set by the coupling matrix and the phase difference, and a continuous
//! phase drift. Under phase alignment the ensemble relative frequencies
//! reproduce unitary quantum evolution generated by the induced
//! Hamiltonian; this crate implements the ensemble dynamics, the exact
//! references it is checked against, the Hamiltonian phase-alignment
//! model, the one-dimensional lattice used for the classical limit, and
//! the statistical comparison machinery.
//!
//! Modules:
//! - [`spec`]: model parameters and the Hamiltonian correspondence.
//! - [`ensemble`]: the member population and its stochastic steppers.
//! - [`reference`]: eigendecomposition propagation and the density/phase
//!   ODE form of the same dynamics.
//! - [`alignment`]: the first-order Hamiltonian system whose zero-energy
//!   solutions pin the per-member phases to their class values.
//! - [`classical`]: periodic lattice models, quantum potential, continuity
//!   and Hamilton-Jacobi residuals, packet tracking.
//! - [`analysis`]: total-variation comparisons, convergence studies, node
//!   and time-reversal diagnostics.

pub mod alignment;
pub mod analysis;
pub mod classical;
pub mod ensemble;
pub mod error;
pub mod reference;
pub mod spec;

pub use error::{Error, Result};
pub use spec::{Hamiltonian, ModelSpec};
