//! Periodic-box numerical laboratory for the two-fluid non-isentropic
//! Euler-Maxwell system: spectral discretization, pointwise symmetrizer
//! algebra, non-constant steady states, time integration of small
//! perturbations, and energy/decay diagnostics.

pub mod algebra;
pub mod diagnostics;
pub mod dynamics;
pub mod equilibrium;
pub mod error;
pub mod grid;
pub mod io;

pub use error::{exit_code_for, EmxError, Result};
pub use grid::{Grid, ScalarField, VectorField};
