//! Kirchhoff–Love shell kernel: kinematics, St. Venant–Kirchhoff
//! constitutive law in curvilinear coordinates, energies, residuals,
//! stiffness and control-point partials, all generated from one generic
//! energy routine by forward-mode differentiation.

mod assembly;
mod kernel;
mod material;
mod patch;
mod quadrature;

pub use assembly::{PatchAssembly, PatchSystem};
pub use kernel::{kinematics_at, Kinematics};
pub use material::Material;
pub use patch::{ClampOrder, ElementContext, LoadCase, PatchEdge, QpTables, ShellPatch};
pub use quadrature::gauss_legendre;
