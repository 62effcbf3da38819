//! Isogeometric Kirchhoff-Love shell analysis and adjoint shape optimization.
//!
//! The crate assembles penalty-coupled multi-patch NURBS shell systems,
//! differentiates them with respect to displacements, control points and
//! intersection coordinates, and drives gradient-based shape optimization
//! through a component graph (free-form deformation, multilevel design
//! models and moving intersections).

pub mod ad;
pub mod error;
pub mod coupling;
pub mod geometry;
pub mod graph;
pub mod optimizer;
mod par;
pub mod shell;
pub mod solver;
pub mod splines;

pub use error::{Error, Result};
