//! Adaptive Biasing Force (ABF) on periodic domains.
//!
//! The crate is split along the data flow of the method:
//!
//! * [`grid`] periodic grids over the reaction-coordinate torus and their norms,
//! * [`potential`] closed-form trigonometric test potentials and quadrature
//!   oracles for the free energy and the mean force,
//! * [`kernel`] the von Mises regularization kernel,
//! * [`projection`] the Helmholtz projection `F -> A` solving `ΔA = div F`,
//! * [`estimator`] online kernel-weighted mean-force accumulators,
//! * [`sampler`] the self-interacting Euler–Maruyama dynamics,
//! * [`fixedpoint`] the deterministic fixed-point map, Picard iteration and
//!   the limiting flow on the attracting set,
//! * [`output`] CSV/JSON writers shared by the command-line front end.

pub mod error;
pub mod estimator;
pub mod fixedpoint;
pub mod grid;
pub mod kernel;
pub mod output;
pub mod potential;
pub mod projection;
pub mod sampler;

pub use error::{AbfError, Result};
pub use estimator::BiasAccumulator;
pub use fixedpoint::{AttractorState, FixedPointResult};
pub use grid::{GridFunction, Norm, PeriodicGrid, TorusPoint, VectorField};
pub use kernel::KernelParams;
pub use potential::{FreeEnergyOracle, PotentialSpec};
pub use projection::{BiasFunction, Projector};
pub use sampler::{RunRecord, SimConfig};

/// 2π.
pub const TAU: f64 = std::f64::consts::TAU;
