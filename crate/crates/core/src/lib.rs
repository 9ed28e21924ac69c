//! Multigrid eigensolver for symmetric second-order elliptic eigenvalue
//! problems on nested triangulations.
//!
//! The library discretizes `a(u, v) = lambda * b(u, v)` with piecewise-linear
//! finite elements under homogeneous Dirichlet conditions, solves a small
//! dense eigenproblem on the coarsest mesh once, and carries eigenpair
//! approximations up a refinement hierarchy. Each level applies one (or a
//! few) shifted-inverse correction steps whose linear systems are solved by
//! conjugate gradients preconditioned with a geometric V-cycle, so the whole
//! scheme costs a constant number of multigrid solves per level.
//!
//! Module map:
//! - [`mesh`]: triangulations, regular refinement, prolongation operators
//! - [`assembly`]: P1 stiffness/mass assembly over free unknowns
//! - [`linsolve`]: shifted operators, PCG, and the V-cycle preconditioner
//! - [`eigensolve`]: coarse solve, shift selection, multigrid correction
//!   schemes for one eigenpair or the lowest `m`
//! - [`verify`]: direct reference solvers, error measures, convergence studies

pub mod assembly;
pub mod eigensolve;
pub mod linsolve;
pub mod mesh;
pub mod verify;

mod dense;
mod error;
mod sparse;

pub use error::{Error, Result};
pub use sparse::SparseMatrix;
