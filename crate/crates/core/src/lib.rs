//! Finite element solver for incompressible flows with implicitly
//! constituted rheology on the unit square.

pub mod analysis;
pub mod constitutive;
pub mod error;
pub mod fespace;
pub mod forms;
pub mod mesh;
pub mod par;
pub mod quadrature;
pub mod solver;
pub mod sparse;
pub mod timestepper;

pub use error::{Error, Result};
pub use par::Execution;
