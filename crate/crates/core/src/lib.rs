//! Time-domain Galerkin boundary elements for the scalar wave equation:
//! retarded layer potentials, marching-on-in-time, and Uzawa solvers for
//! dynamic contact and punch problems.

pub mod error;
pub mod experiments;
pub mod analysis;
pub mod assembly;
pub mod cache;
pub mod mesh;
pub mod mot;
pub mod quadrature;
pub mod timebasis;
pub mod vi_solvers;

pub use error::{Error, Result};
