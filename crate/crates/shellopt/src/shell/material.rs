use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Isotropic plane-stress St. Venant–Kirchhoff material.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Material {
    /// Young's modulus [Pa].
    pub e: f64,
    /// Poisson's ratio.
    pub nu: f64,
}

impl Material {
    pub fn new(e: f64, nu: f64) -> Result<Self> {
        if !(e > 0.0) || !e.is_finite() {
            return Err(Error::InvalidGeometry(format!(
                "Young's modulus must be positive and finite, got {e}"
            )));
        }
        if !(0.0..0.5).contains(&nu) {
            return Err(Error::InvalidGeometry(format!(
                "Poisson's ratio must satisfy 0 <= nu < 0.5, got {nu}"
            )));
        }
        Ok(Material { e, nu })
    }

    /// Lamé-style plane-stress coefficients `(λ̄, μ)` with
    /// `λ̄ = Eν/(1−ν²)`, `μ = E/(2(1+ν))`.
    pub fn plane_stress_lame(&self) -> (f64, f64) {
        (
            self.e * self.nu / (1.0 - self.nu * self.nu),
            self.e / (2.0 * (1.0 + self.nu)),
        )
    }
}
