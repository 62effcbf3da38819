//! B-spline and NURBS primitives: knot vectors, surfaces, trivariate
//! blocks, and space-transfer operators (degree elevation, knot refinement).

mod knots;
mod refine;
mod surface;
mod volume;

pub use knots::KnotVector;
pub use refine::{elevate_degree, refine_knots, transfer_matrix_1d, SurfaceTransfer};
pub use surface::{NurbsSurface, SurfaceJet};
pub use volume::BsplineVolume;
