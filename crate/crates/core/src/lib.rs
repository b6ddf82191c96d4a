//! rnls: a numerical laboratory for the focusing mass-critical nonlinear
//! Schrodinger equation driven by conservative multiplicative noise.
//!
//! The crate is organized bottom-up:
//!
//! * [`grid`], [`field`], [`spectral`], [`functionals`] - periodic
//!   pseudospectral discretization, inner products, conserved quantities.
//! * [`profiles`] - ground states (Petviashvili), the radial correction
//!   profile, deformed solitons, the pseudo-conformal blow-up family, and
//!   the symmetry group of the equation.
//! * [`noise`] - spatially smooth noise bases flat at the origin, Brownian
//!   drivers with their second-order (iterated-integral) lift, and the
//!   derived first-order fields entering the gauged equation.
//! * [`roughpath`] - controlled-path integration against the lifted driver
//!   and a weak-form solution verifier.
//! * [`evolve`] - Strang-split gauged solver, adaptive stepping, blow-up
//!   detection, and the energy-drift audit.
//! * [`modulation`] - linearized operators, coercivity probes, Newton
//!   decomposition into soliton parameters, modulation-equation residuals,
//!   and the generalized energy functional.
//! * [`snapshot`] - binary field snapshots, driver serialization, and the
//!   profile cache.
//! * [`lab`] - experiment drivers behind the CLI.

pub mod error;
pub mod field;
pub mod functionals;
pub mod grid;
pub mod lab;
pub mod modulation;
pub mod noise;
pub mod profiles;
pub mod roughpath;
pub mod snapshot;
pub mod spectral;
pub mod evolve;

pub use error::{Error, Result};
pub use field::Field;
pub use grid::Grid;
