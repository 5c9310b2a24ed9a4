//! Mean-field solvers for a finite-temperature Bose gas with a periodically
//! modulated scattering length.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid`], [`operator`], [`banded`], [`linsolve`], [`eigen`]: discretisation
//!   and linear algebra on a truncated box with Dirichlet walls.
//! * [`microstructure`]: the zero-mean periodic modulation `A` and its cell
//!   inverse Laplacians.
//! * [`thermo`]: Bose-Einstein occupation closure and its perturbative expansion.
//! * [`scf`]: stationary self-consistent condensate and thermal-cloud states.
//! * [`homogenization`]: two-scale expansion of the stationary system.
//! * [`dynamics`]: time evolution with frozen occupations.

pub mod banded;
pub mod config;
pub mod dynamics;
pub mod eigen;
pub mod error;
pub mod fit;
pub mod grid;
pub mod homogenization;
pub mod linsolve;
pub mod microstructure;
pub mod operator;
pub mod scf;
pub mod thermo;

pub use error::{Error, Result};
pub use grid::{build_grid, Complex64, ComplexField, Grid, RealField};
pub use operator::{build_hamiltonian, LinearOperator, StencilOrder};
