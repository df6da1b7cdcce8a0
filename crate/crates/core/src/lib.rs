//! Conservative particle systems with degenerate jump rates on the discrete
//! torus, their product equilibrium measures, and the modified porous medium
//! equation `∂ₜρ = Δ(Φ(ρ)^m)` that governs them under diffusive scaling.
//!
//! Module map:
//!
//! - [`lattice`]: torus geometry, configurations and particle moves.
//! - [`rates`]: jump intensities `g`, the constrained rate kernels and the
//!   cylinder functions used by the local-equilibrium diagnostics.
//! - [`measures`]: partition function, density map `R`, its inverse `Φ`,
//!   sampling of product measures and their relative entropies.
//! - [`simulator`]: event-driven kinetic Monte Carlo for the generator.
//! - [`ergodicity`]: exact analysis of fixed-particle-number hyperplanes.
//! - [`grid`] and [`pde`]: periodic grid functions and the finite-difference
//!   solver.
//! - [`harness`]: hydrodynamic-limit and local-equilibrium experiments.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ergodicity;
pub mod error;
pub mod grid;
pub mod harness;
pub mod lattice;
pub mod measures;
pub mod pde;
pub mod profile;
pub mod rates;
pub mod simulator;

pub use error::{Error, Result};
pub use grid::GridFunction;
pub use lattice::{Configuration, Site, TorusGeometry};
pub use measures::EquilibriumFamily;
pub use profile::{DensityProfile, ProfileShape};
pub use rates::{GFunction, Kernel};
