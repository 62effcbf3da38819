use super::material::Material;
use super::quadrature::gauss_legendre;
use crate::splines::NurbsSurface;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// External load acting on a patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LoadCase {
    /// Constant force vector per unit reference area.
    Dead { force_per_area: [f64; 3] },
    /// Pressure along the surface normal; `follower` switches between the
    /// reference normal (conservative, load fixed in the material frame)
    /// and the deformed normal (via the swept-volume potential).
    NormalPressure { magnitude: f64, follower: bool },
    /// Constant-direction load whose magnitude scales with the projection
    /// of the reference unit normal onto that direction:
    /// `f = -p (e·A3) e` per unit reference area.
    ProjectedPressure { magnitude: f64, direction: [f64; 3] },
}

impl LoadCase {
    pub fn validate(&self) -> Result<()> {
        let finite = |x: f64| x.is_finite();
        let ok = match self {
            LoadCase::Dead { force_per_area } => force_per_area.iter().all(|&c| finite(c)),
            LoadCase::NormalPressure { magnitude, .. } => finite(*magnitude),
            LoadCase::ProjectedPressure {
                magnitude,
                direction,
            } => {
                finite(*magnitude)
                    && direction.iter().all(|&c| finite(c))
                    && direction.iter().map(|c| c * c).sum::<f64>() > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidGeometry("load magnitudes must be finite".into()))
        }
    }
}

/// Parametric boundary of a patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchEdge {
    UMin,
    UMax,
    VMin,
    VMax,
}

/// How many control-point rows an edge fixation grabs: one row pins
/// displacement, two rows additionally clamp the edge rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClampOrder {
    Pinned,
    Clamped,
}

/// Per-quadrature-point rational basis tables: values and parametric
/// derivatives `[R, R_u, R_v, R_uu, R_uv, R_vv]` over the element support,
/// plus the parametric quadrature weight.
#[derive(Debug, Clone)]
pub struct QpTables {
    pub weight: f64,
    pub r: [Vec<f64>; 6],
}

/// One Bezier element: support control-point indices and quadrature data.
/// The tables depend only on the parameterization (knots and weights), so
/// they stay valid while control points move during optimization.
#[derive(Debug, Clone)]
pub struct ElementContext {
    pub support: Vec<usize>,
    pub qps: Vec<QpTables>,
    /// Parametric rectangle, for diagnostics.
    pub domain: (f64, f64, f64, f64),
}

/// Kirchhoff–Love shell patch: geometry, section data, loads and
/// constraints, with cached element quadrature tables.
#[derive(Debug, Clone)]
pub struct ShellPatch {
    surface: NurbsSurface,
    thickness: f64,
    material: Material,
    loads: Vec<LoadCase>,
    /// Local displacement dofs (3·cp + component) forced to zero.
    fixed_dofs: BTreeSet<usize>,
    elements: Vec<ElementContext>,
}

impl ShellPatch {
    pub fn new(surface: NurbsSurface, thickness: f64, material: Material) -> Result<Self> {
        if !(thickness > 0.0) || !thickness.is_finite() {
            return Err(Error::InvalidGeometry(format!(
                "thickness must be positive, got {thickness}"
            )));
        }
        let elements = build_elements(&surface);
        Ok(ShellPatch {
            surface,
            thickness,
            material,
            loads: Vec::new(),
            fixed_dofs: BTreeSet::new(),
            elements,
        })
    }

    pub fn surface(&self) -> &NurbsSurface {
        &self.surface
    }

    pub fn thickness(&self) -> f64 {
        self.thickness
    }

    pub fn material(&self) -> &Material {
        &self.material
    }

    pub fn loads(&self) -> &[LoadCase] {
        &self.loads
    }

    pub fn elements(&self) -> &[ElementContext] {
        &self.elements
    }

    pub fn fixed_dofs(&self) -> &BTreeSet<usize> {
        &self.fixed_dofs
    }

    /// Displacement dofs of the patch (3 per control point).
    pub fn ndof(&self) -> usize {
        3 * self.surface.num_cps()
    }

    pub fn add_load(&mut self, load: LoadCase) -> Result<()> {
        load.validate()?;
        self.loads.push(load);
        Ok(())
    }

    /// Replace control points; the parameterization (knots, weights) is
    /// unchanged so cached quadrature tables remain valid.
    pub fn set_control_points(&mut self, cps: Vec<[f64; 3]>) -> Result<()> {
        self.surface = self.surface.with_control_points(cps)?;
        Ok(())
    }

    pub fn fix_dof(&mut self, cp_flat: usize, component: usize) {
        debug_assert!(component < 3 && cp_flat < self.surface.num_cps());
        self.fixed_dofs.insert(3 * cp_flat + component);
    }

    /// Fix the given displacement components on all control points of an
    /// edge row; `Clamped` grabs the adjacent row as well, which also
    /// constrains the edge rotation.
    pub fn fix_edge(&mut self, edge: PatchEdge, components: &[usize], order: ClampOrder) {
        let rows = match order {
            ClampOrder::Pinned => 1,
            ClampOrder::Clamped => 2,
        };
        let (nu, nv) = (self.surface.num_u(), self.surface.num_v());
        for depth in 0..rows {
            let cps: Vec<usize> = match edge {
                PatchEdge::UMin => (0..nv).map(|j| self.surface.cp_index(depth, j)).collect(),
                PatchEdge::UMax => (0..nv)
                    .map(|j| self.surface.cp_index(nu - 1 - depth, j))
                    .collect(),
                PatchEdge::VMin => (0..nu).map(|i| self.surface.cp_index(i, depth)).collect(),
                PatchEdge::VMax => (0..nu)
                    .map(|i| self.surface.cp_index(i, nv - 1 - depth))
                    .collect(),
            };
            for cp in cps {
                for &c in components {
                    self.fix_dof(cp, c);
                }
            }
        }
    }

    /// Largest element diagonal in physical space, used for penalty
    /// parameter scaling.
    pub fn max_element_size(&self) -> f64 {
        let mut h: f64 = 0.0;
        for el in &self.elements {
            let (ua, ub, va, vb) = el.domain;
            let c0 = self.surface.eval(ua, va);
            let c1 = self.surface.eval(ub, vb);
            let d: f64 = (0..3).map(|k| (c1[k] - c0[k]).powi(2)).sum();
            h = h.max(d.sqrt());
        }
        h
    }
}

/// Gauss–Legendre tables with `max(p, q) + 1` points per direction on every
/// non-empty knot span.
fn build_elements(surface: &NurbsSurface) -> Vec<ElementContext> {
    let (p, q) = surface.degrees();
    let nq = p.max(q) + 1;
    let (gx, gw) = gauss_legendre(nq);
    let mut out = Vec::new();
    for &(_, ua, ub) in &surface.knots_u().elements() {
        for &(_, va, vb) in &surface.knots_v().elements() {
            let ju = 0.5 * (ub - ua);
            let jv = 0.5 * (vb - va);
            let mut qps = Vec::with_capacity(nq * nq);
            let mut support: Option<Vec<usize>> = None;
            for (iu, &xu) in gx.iter().enumerate() {
                let u = 0.5 * (ua + ub) + ju * xu;
                for (iv, &xv) in gx.iter().enumerate() {
                    let v = 0.5 * (va + vb) + jv * xv;
                    let (idx, tables) = surface.rational_basis_derivs(u, v);
                    if support.is_none() {
                        support = Some(idx);
                    } else {
                        debug_assert_eq!(support.as_deref(), Some(idx.as_slice()));
                    }
                    qps.push(QpTables {
                        weight: gw[iu] * gw[iv] * ju * jv,
                        r: tables,
                    });
                }
            }
            out.push(ElementContext {
                support: support.unwrap(),
                qps,
                domain: (ua, ub, va, vb),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splines::KnotVector;

    fn flat_patch(nel: usize, degree: usize) -> ShellPatch {
        let k = KnotVector::uniform(degree, nel).unwrap();
        let g = k.greville();
        let mut cps = Vec::new();
        for &u in &g {
            for &v in &g {
                cps.push([u * 2.0, v * 1.0, 0.0]);
            }
        }
        let n = g.len() * g.len();
        let surface = NurbsSurface::new(k.clone(), k.clone(), cps, vec![1.0; n]).unwrap();
        ShellPatch::new(surface, 0.01, Material::new(1e9, 0.3).unwrap()).unwrap()
    }

    #[test]
    fn element_count_and_quadrature_weights() {
        let patch = flat_patch(3, 2);
        assert_eq!(patch.elements().len(), 9);
        for el in patch.elements() {
            assert_eq!(el.qps.len(), 9);
            let sum: f64 = el.qps.iter().map(|q| q.weight).sum();
            // Weights sum to the parametric element area.
            let (ua, ub, va, vb) = el.domain;
            approx::assert_relative_eq!(sum, (ub - ua) * (vb - va), epsilon = 1e-14);
            assert!(el.qps.iter().all(|q| q.weight > 0.0));
        }
    }

    #[test]
    fn edge_fixing_grabs_rows() {
        let mut patch = flat_patch(2, 2);
        let nv = patch.surface().num_v();
        patch.fix_edge(PatchEdge::UMin, &[0, 1, 2], ClampOrder::Pinned);
        assert_eq!(patch.fixed_dofs().len(), 3 * nv);
        let mut patch2 = flat_patch(2, 2);
        patch2.fix_edge(PatchEdge::UMin, &[2], ClampOrder::Clamped);
        assert_eq!(patch2.fixed_dofs().len(), 2 * nv);
        let mut patch3 = flat_patch(2, 2);
        patch3.fix_edge(PatchEdge::VMax, &[0], ClampOrder::Pinned);
        let nu = patch3.surface().num_u();
        assert_eq!(patch3.fixed_dofs().len(), nu);
    }

    #[test]
    fn invalid_inputs_rejected() {
        let patch = flat_patch(1, 1);
        assert!(ShellPatch::new(patch.surface().clone(), 0.0, *patch.material()).is_err());
        let mut p = patch.clone();
        assert!(p
            .add_load(LoadCase::Dead {
                force_per_area: [f64::NAN, 0.0, 0.0]
            })
            .is_err());
        assert!(p
            .add_load(LoadCase::ProjectedPressure {
                magnitude: 1.0,
                direction: [0.0; 3]
            })
            .is_err());
    }
}
