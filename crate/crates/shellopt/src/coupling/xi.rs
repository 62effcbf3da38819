//! Relocation of intersection quadrature nodes on moving geometry.
//!
//! When control points move, a differentiable intersection changes its
//! parametric trace. The new node positions are found as the root of a
//! square residual `R_L` over the `4m` unknown parametric coordinates
//! `[u_a, v_a, u_b, v_b]` per node:
//!
//! * coincidence (3 rows per node): `S_a(u_a, v_a) − S_b(u_b, v_b) = 0`,
//! * uniform spacing (`m − 2` rows): consecutive physical segment lengths
//!   on side `a` are equal,
//! * end pinning (2 rows): at each end, the parametric coordinate that
//!   terminates the curve is pinned to its domain bound.
//!
//! The pinned coordinate per end is inferred from the traced geometry at
//! setup — among coordinates sitting at a domain bound, the one most
//! aligned with the curve direction — and kept fixed thereafter.

use nalgebra::{DMatrix, DVector};

use super::mesh::QuadratureMesh;
use crate::geometry::MultiPatchModel;
use crate::solver::{CscMatrix, Triplets};
use crate::{Error, Result};

/// One end-pinning row: a node, one of its four parametric coordinates,
/// and the domain bound it is held at.
#[derive(Debug, Clone, Copy)]
pub struct PinnedEnd {
    pub node: usize,
    /// Coordinate within the node block: 0 = u_a, 1 = v_a, 2 = u_b, 3 = v_b.
    pub coord: usize,
    pub value: f64,
}

/// Square nonlinear system locating one differentiable intersection.
#[derive(Debug, Clone)]
pub struct XiSystem {
    pub patch_a: usize,
    pub patch_b: usize,
    /// Node count `m`; the unknown vector has `4m` entries.
    pub num_nodes: usize,
    pub pins: [PinnedEnd; 2],
    /// Per-coordinate parametric domains `[u_a, v_a, u_b, v_b]`.
    domains: [(f64, f64); 4],
}

/// Flatten per-side node lists into the `4m` unknown layout.
pub fn pack_nodes(nodes_a: &[(f64, f64)], nodes_b: &[(f64, f64)]) -> Vec<f64> {
    let mut x = Vec::with_capacity(4 * nodes_a.len());
    for (a, b) in nodes_a.iter().zip(nodes_b) {
        x.extend_from_slice(&[a.0, a.1, b.0, b.1]);
    }
    x
}

/// Split the `4m` unknown layout back into per-side node lists.
pub fn unpack_nodes(x: &[f64]) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
    let m = x.len() / 4;
    let mut a = Vec::with_capacity(m);
    let mut b = Vec::with_capacity(m);
    for j in 0..m {
        a.push((x[4 * j], x[4 * j + 1]));
        b.push((x[4 * j + 2], x[4 * j + 3]));
    }
    (a, b)
}

impl XiSystem {
    /// Set up the system for the mesh's intersection, inferring the pinned
    /// end coordinates from the current node trace.
    pub fn new(model: &MultiPatchModel, mesh: &QuadratureMesh) -> Result<Self> {
        let m = mesh.num_nodes();
        if m < 3 {
            return Err(Error::InvalidGeometry(format!(
                "moving intersections need at least 3 quadrature nodes, got {m}"
            )));
        }
        let sa = model.patches[mesh.patch_a].surface();
        let sb = model.patches[mesh.patch_b].surface();
        let domains = [
            sa.knots_u().domain(),
            sa.knots_v().domain(),
            sb.knots_u().domain(),
            sb.knots_v().domain(),
        ];

        let pin_at = |node: usize, toward: usize| -> Result<PinnedEnd> {
            // Curve direction at this end, per side, normalized in
            // parameter space.
            let dir = |p: (f64, f64), q: (f64, f64)| -> (f64, f64) {
                let (du, dv) = (q.0 - p.0, q.1 - p.1);
                let n = (du * du + dv * dv).sqrt();
                if n > 0.0 {
                    (du / n, dv / n)
                } else {
                    (0.0, 0.0)
                }
            };
            let ta = dir(mesh.nodes_a[node], mesh.nodes_a[toward]);
            let tb = dir(mesh.nodes_b[node], mesh.nodes_b[toward]);
            let coords = [
                mesh.nodes_a[node].0,
                mesh.nodes_a[node].1,
                mesh.nodes_b[node].0,
                mesh.nodes_b[node].1,
            ];
            let align = [ta.0.abs(), ta.1.abs(), tb.0.abs(), tb.1.abs()];
            let mut best: Option<(f64, PinnedEnd)> = None;
            for c in 0..4 {
                let (lo, hi) = domains[c];
                let tol = 1e-6 * (hi - lo);
                let bound = if (coords[c] - lo).abs() <= tol {
                    Some(lo)
                } else if (coords[c] - hi).abs() <= tol {
                    Some(hi)
                } else {
                    None
                };
                if let Some(value) = bound {
                    let candidate = PinnedEnd { node, coord: c, value };
                    if best.as_ref().map_or(true, |(a, _)| align[c] > *a + 1e-12) {
                        best = Some((align[c], candidate));
                    }
                }
            }
            match best {
                Some((a, pin)) if a > 0.1 => Ok(pin),
                _ => Err(Error::IntersectionFailed(format!(
                    "cannot infer a pinned end coordinate at node {node}: no domain-bound \
                     coordinate is aligned with the curve direction"
                ))),
            }
        };
        let pins = [pin_at(0, 1)?, pin_at(m - 1, m - 2)?];

        Ok(XiSystem {
            patch_a: mesh.patch_a,
            patch_b: mesh.patch_b,
            num_nodes: m,
            pins,
            domains,
        })
    }

    pub fn dim(&self) -> usize {
        4 * self.num_nodes
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "xi system has {} unknowns, got {}",
                self.dim(),
                x.len()
            )));
        }
        Ok(())
    }

    /// Residual `R_L(P, ξ̃)`; rows are the `3m` coincidence equations,
    /// then `m − 2` spacing equations, then the two end pins.
    pub fn residual(&self, model: &MultiPatchModel, x: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let sa = model.patches[self.patch_a].surface();
        let sb = model.patches[self.patch_b].surface();
        let m = self.num_nodes;
        let mut r = vec![0.0; self.dim()];
        let mut pos_a = Vec::with_capacity(m);
        for j in 0..m {
            let xa = sa.eval(x[4 * j], x[4 * j + 1]);
            let xb = sb.eval(x[4 * j + 2], x[4 * j + 3]);
            for c in 0..3 {
                r[3 * j + c] = xa[c] - xb[c];
            }
            pos_a.push(xa);
        }
        let seg = |j: usize| -> f64 {
            (0..3)
                .map(|c| (pos_a[j + 1][c] - pos_a[j][c]).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        for j in 1..m - 1 {
            r[3 * m + (j - 1)] = seg(j) - seg(j - 1);
        }
        for (i, pin) in self.pins.iter().enumerate() {
            r[4 * m - 2 + i] = x[4 * pin.node + pin.coord] - pin.value;
        }
        Ok(r)
    }

    /// Hand-assembled square Jacobian `∂R_L/∂ξ̃`.
    pub fn jacobian_xi(&self, model: &MultiPatchModel, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_x(x)?;
        let sa = model.patches[self.patch_a].surface();
        let sb = model.patches[self.patch_b].surface();
        let m = self.num_nodes;
        let n = self.dim();
        let mut jac = DMatrix::zeros(n, n);

        // First-order jets per node.
        let mut pos_a = Vec::with_capacity(m);
        let mut tan_a = Vec::with_capacity(m);
        for j in 0..m {
            let ja = sa.jet2(x[4 * j], x[4 * j + 1]);
            let jb = sb.jet2(x[4 * j + 2], x[4 * j + 3]);
            for c in 0..3 {
                jac[(3 * j + c, 4 * j)] = ja.du[c];
                jac[(3 * j + c, 4 * j + 1)] = ja.dv[c];
                jac[(3 * j + c, 4 * j + 2)] = -jb.du[c];
                jac[(3 * j + c, 4 * j + 3)] = -jb.dv[c];
            }
            pos_a.push(ja.x);
            tan_a.push([ja.du, ja.dv]);
        }

        // d seg(j) / d node coordinates: ±ĉ_j · a_i at the segment ends.
        let seg_dir = |j: usize| -> Result<[f64; 3]> {
            let mut c = [0.0; 3];
            let mut len = 0.0;
            for k in 0..3 {
                c[k] = pos_a[j + 1][k] - pos_a[j][k];
                len += c[k] * c[k];
            }
            let len = len.sqrt();
            if !(len > 0.0) {
                return Err(Error::IntersectionFailed(format!(
                    "coincident quadrature nodes {j} and {} on side a",
                    j + 1
                )));
            }
            for k in &mut c {
                *k /= len;
            }
            Ok(c)
        };
        for j in 1..m - 1 {
            let row = 3 * m + (j - 1);
            let cj = seg_dir(j)?;
            let cjm = seg_dir(j - 1)?;
            for (node, dir, sign) in [
                (j + 1, cj, 1.0),
                (j, cj, -1.0),
                (j, cjm, -1.0),
                (j - 1, cjm, 1.0),
            ] {
                for t in 0..2 {
                    let dot: f64 = (0..3).map(|k| dir[k] * tan_a[node][t][k]).sum();
                    jac[(row, 4 * node + t)] += sign * dot;
                }
            }
        }

        for (i, pin) in self.pins.iter().enumerate() {
            jac[(4 * m - 2 + i, 4 * pin.node + pin.coord)] = 1.0;
        }
        Ok(jac)
    }

    /// Sparse `∂R_L/∂P`; columns follow the global control-point dof
    /// layout (3 coordinates per control point, patches concatenated).
    pub fn jacobian_cp(&self, model: &MultiPatchModel, x: &[f64]) -> Result<CscMatrix> {
        self.check_x(x)?;
        let sa = model.patches[self.patch_a].surface();
        let sb = model.patches[self.patch_b].surface();
        let offsets = model.dof_offsets();
        let (off_a, off_b) = (offsets[self.patch_a], offsets[self.patch_b]);
        let m = self.num_nodes;
        let mut trip = Triplets::new(self.dim(), *offsets.last().unwrap());

        // Coincidence rows: basis values on each side.
        let mut basis_a = Vec::with_capacity(m);
        let mut pos_a = Vec::with_capacity(m);
        for j in 0..m {
            let (sup_a, tab_a) = sa.rational_basis_derivs(x[4 * j], x[4 * j + 1]);
            let (sup_b, tab_b) = sb.rational_basis_derivs(x[4 * j + 2], x[4 * j + 3]);
            for (i, &g) in sup_a.iter().enumerate() {
                for c in 0..3 {
                    trip.push(3 * j + c, off_a + 3 * g + c, tab_a[0][i]);
                }
            }
            for (i, &g) in sup_b.iter().enumerate() {
                for c in 0..3 {
                    trip.push(3 * j + c, off_b + 3 * g + c, -tab_b[0][i]);
                }
            }
            pos_a.push(sa.eval(x[4 * j], x[4 * j + 1]));
            basis_a.push((sup_a, tab_a));
        }

        // Spacing rows: ∂‖x_{j+1} − x_j‖/∂P = ĉ_j ⊗ (R(ξ_{j+1}) − R(ξ_j)).
        let seg_dir = |j: usize| -> Option<[f64; 3]> {
            let mut c = [0.0; 3];
            let mut len = 0.0;
            for k in 0..3 {
                c[k] = pos_a[j + 1][k] - pos_a[j][k];
                len += c[k] * c[k];
            }
            let len = len.sqrt();
            if len > 0.0 {
                for k in &mut c {
                    *k /= len;
                }
                Some(c)
            } else {
                None
            }
        };
        for j in 1..m - 1 {
            let row = 3 * m + (j - 1);
            for (seg, sign) in [(j, 1.0), (j - 1, -1.0)] {
                let Some(dir) = seg_dir(seg) else { continue };
                for (node, end_sign) in [(seg + 1, 1.0), (seg, -1.0)] {
                    let (sup, tab) = &basis_a[node];
                    for (i, &g) in sup.iter().enumerate() {
                        for c in 0..3 {
                            trip.push(
                                row,
                                off_a + 3 * g + c,
                                sign * end_sign * dir[c] * tab[0][i],
                            );
                        }
                    }
                }
            }
        }
        // Pin rows do not depend on control points.
        Ok(trip.into_csc())
    }

    /// Newton solve of `R_L = 0` with per-coordinate domain clamping.
    ///
    /// Converges when `‖R_L‖₂ ≤ 1e-10 ×` model diameter; refuses after 50
    /// iterations with the worst residual block named.
    pub fn solve(&self, model: &MultiPatchModel, x0: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x0)?;
        let tol = 1e-10 * model.diameter();
        let m = self.num_nodes;
        let mut x = x0.to_vec();
        for _ in 0..50 {
            let r = self.residual(model, &x)?;
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= tol {
                return Ok(x);
            }
            let jac = self.jacobian_xi(model, &x)?;
            let rhs = DVector::from_column_slice(&r);
            let lu = jac.lu();
            let Some(dx) = lu.solve(&rhs) else {
                return Err(Error::IntersectionFailed(
                    "singular intersection Jacobian (tangential intersection)".into(),
                ));
            };
            for (i, xi) in x.iter_mut().enumerate() {
                let (lo, hi) = self.domains[i % 4];
                *xi = (*xi - dx[i]).clamp(lo, hi);
            }
        }
        let r = self.residual(model, &x)?;
        let (mut worst, mut worst_val) = (0usize, 0.0f64);
        for (i, v) in r.iter().enumerate() {
            if v.abs() > worst_val {
                worst = i;
                worst_val = v.abs();
            }
        }
        let block = if worst < 3 * m {
            format!("coincidence (node {})", worst / 3)
        } else if worst < 4 * m - 2 {
            format!("spacing (segment pair {})", worst - 3 * m + 1)
        } else {
            format!("end pin {}", worst - (4 * m - 2))
        };
        Err(Error::IntersectionFailed(format!(
            "intersection relocation did not converge in 50 iterations; worst block: {block}, \
             |r| = {worst_val:.3e}"
        )))
    }

    /// Condition-number estimate of `∂R_L/∂ξ̃` (largest over smallest
    /// singular value); a diagnostic for nearly tangential intersections.
    pub fn condition_estimate(&self, model: &MultiPatchModel, x: &[f64]) -> Result<f64> {
        let jac = self.jacobian_xi(model, x)?;
        let svd = jac.svd(false, false);
        let max = svd.singular_values.max();
        let min = svd
            .singular_values
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        Ok(if min > 0.0 { max / min } else { f64::INFINITY })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::mesh::QuadratureMesh;
    use crate::shell::{Material, ShellPatch};
    use crate::splines::NurbsSurface;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Horizontal plate z = 0 over [0,2]×[0,1], biquadratic.
    fn plate_a() -> ShellPatch {
        let s = NurbsSurface::bilinear(
            [0.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [2.0, 1.0, 0.0],
        );
        let s = crate::splines::elevate_degree(&s, 1, 1).unwrap().surface;
        ShellPatch::new(s, 0.01, Material::new(1e9, 0.3).unwrap()).unwrap()
    }

    /// Vertical plate x = 1 over y ∈ [0,1], z ∈ [−0.5, 0.5], biquadratic.
    fn plate_b() -> ShellPatch {
        let s = NurbsSurface::bilinear(
            [1.0, 0.0, -0.5],
            [1.0, 1.0, -0.5],
            [1.0, 0.0, 0.5],
            [1.0, 1.0, 0.5],
        );
        let s = crate::splines::elevate_degree(&s, 1, 1).unwrap().surface;
        ShellPatch::new(s, 0.01, Material::new(1e9, 0.3).unwrap()).unwrap()
    }

    fn crossing_model() -> (MultiPatchModel, QuadratureMesh, XiSystem) {
        let mut model = MultiPatchModel::new(vec![plate_a(), plate_b()]);
        model.detect_intersections(32).unwrap();
        assert_eq!(model.intersections.len(), 1);
        let mesh = QuadratureMesh::build(&model, 0, 1e3).unwrap();
        let sys = XiSystem::new(&model, &mesh).unwrap();
        (model, mesh, sys)
    }

    #[test]
    fn planar_crossing_residual_is_zero_at_exact_nodes() {
        let (model, mesh, sys) = crossing_model();
        let x = pack_nodes(&mesh.nodes_a, &mesh.nodes_b);
        let r = sys.residual(&model, &x).unwrap();
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= 1e-12, "planar crossing residual {norm}");
        // Already-converged input returns unchanged.
        let solved = sys.solve(&model, &x).unwrap();
        for (a, b) in x.iter().zip(&solved) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn planar_crossing_jacobian_matches_hand_derivation() {
        let (model, mesh, sys) = crossing_model();
        let m = sys.num_nodes;
        let x = pack_nodes(&mesh.nodes_a, &mesh.nodes_b);
        let jac = sys.jacobian_xi(&model, &x).unwrap();

        // Plate a: S(u,v) = (2u, v, 0); plate b: S(u,v) = (1, u, v − 1/2).
        // Coincidence rows per node: x-row hits u_a with 2; y-row hits v_a
        // with 1 and u_b with −1; z-row hits v_b with −1.
        for j in 0..m {
            let mut expected = DMatrix::zeros(3, 4);
            expected[(0, 0)] = 2.0;
            expected[(1, 1)] = 1.0;
            expected[(1, 2)] = -1.0;
            expected[(2, 3)] = -1.0;
            for r in 0..3 {
                for c in 0..4 {
                    assert_relative_eq!(
                        jac[(3 * j + r, 4 * j + c)],
                        expected[(r, c)],
                        epsilon = 1e-12
                    );
                }
            }
        }
        // Spacing rows: segments run along +y, so d(h_j − h_{j−1}) is the
        // classic (+1, −2, +1) stencil on the v_a coordinates.
        for j in 1..m - 1 {
            let row = 3 * m + (j - 1);
            assert_relative_eq!(jac[(row, 4 * (j - 1) + 1)], 1.0, epsilon = 1e-12);
            assert_relative_eq!(jac[(row, 4 * j + 1)], -2.0, epsilon = 1e-12);
            assert_relative_eq!(jac[(row, 4 * (j + 1) + 1)], 1.0, epsilon = 1e-12);
        }
        // End pins: the curve runs along v_a, which starts and ends at the
        // domain bounds.
        assert_eq!(sys.pins[0].coord, 1);
        assert_eq!(sys.pins[1].coord, 1);
        assert_relative_eq!(jac[(4 * m - 2, 1)], 1.0, epsilon = 1e-15);
        assert_relative_eq!(jac[(4 * m - 1, 4 * (m - 1) + 1)], 1.0, epsilon = 1e-15);

        let cond = sys.condition_estimate(&model, &x).unwrap();
        assert!(cond.is_finite(), "condition estimate {cond}");
        println!("planar crossing xi-Jacobian condition estimate: {cond:.3e}");
    }

    #[test]
    fn translated_patch_shifts_solution_by_fraction_of_width() {
        let (mut model, mesh, sys) = crossing_model();
        // Translate the vertical plate by δ along x: the intersection moves
        // to x = 1 + δ, i.e. u_a = (1 + δ)/2 on the 2-wide plate; all other
        // coordinates stay put.
        let delta = 0.04;
        let cps: Vec<[f64; 3]> = model.patches[1]
            .surface()
            .control_points()
            .iter()
            .map(|p| [p[0] + delta, p[1], p[2]])
            .collect();
        model.patches[1].set_control_points(cps).unwrap();

        let x0 = pack_nodes(&mesh.nodes_a, &mesh.nodes_b);
        let solved = sys.solve(&model, &x0).unwrap();
        let (na, nb) = unpack_nodes(&solved);
        for (a, b) in na.iter().zip(&nb) {
            assert_relative_eq!(a.0, (1.0 + delta) / 2.0, epsilon = 1e-10);
            assert_relative_eq!(b.1, 0.5, epsilon = 1e-10);
        }
        // The y-stations stay uniformly spaced and pinned at the ends.
        assert_relative_eq!(na[0].1, 0.0, epsilon = 1e-12);
        assert_relative_eq!(na.last().unwrap().1, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn jacobians_match_finite_differences_on_random_models() {
        for seed in [11u64, 29, 47] {
            let mut rng = StdRng::seed_from_u64(seed);
            let mut model = MultiPatchModel::new(vec![plate_a(), plate_b()]);
            // Random out-of-plane warp, small enough to keep the crossing
            // transversal.
            for p in 0..2 {
                let cps: Vec<[f64; 3]> = model.patches[p]
                    .surface()
                    .control_points()
                    .iter()
                    .map(|q| {
                        let mut q = *q;
                        for c in q.iter_mut() {
                            *c += 0.02 * (rng.gen::<f64>() - 0.5);
                        }
                        q
                    })
                    .collect();
                model.patches[p].set_control_points(cps).unwrap();
            }
            model.detect_intersections(32).unwrap();
            assert_eq!(model.intersections.len(), 1, "seed {seed}");
            let mesh = QuadratureMesh::build(&model, 0, 1e3).unwrap();
            let sys = XiSystem::new(&model, &mesh).unwrap();
            let x = pack_nodes(&mesh.nodes_a, &mesh.nodes_b);

            // ∂R_L/∂ξ̃ against central differences.
            let jac = sys.jacobian_xi(&model, &x).unwrap();
            let h = 1e-6;
            for col in 0..sys.dim() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[col] += h;
                xm[col] -= h;
                let rp = sys.residual(&model, &xp).unwrap();
                let rm = sys.residual(&model, &xm).unwrap();
                for row in 0..sys.dim() {
                    let fd = (rp[row] - rm[row]) / (2.0 * h);
                    let v = jac[(row, col)];
                    let scale = v.abs().max(1.0);
                    assert!(
                        (v - fd).abs() <= 1e-5 * scale,
                        "seed {seed} dR/dxi ({row},{col}): {v} vs {fd}"
                    );
                }
            }

            // ∂R_L/∂P against central differences on a handful of dofs.
            let jcp = sys.jacobian_cp(&model, &x).unwrap();
            let dense = jcp.to_dense();
            let offsets = model.dof_offsets();
            let total = *offsets.last().unwrap();
            for _ in 0..12 {
                let col = rng.gen_range(0..total);
                let patch = if col < offsets[1] { 0 } else { 1 };
                let local = col - offsets[patch];
                let perturb = |model: &MultiPatchModel, s: f64| -> MultiPatchModel {
                    let mut m2 = model.clone();
                    let mut cps = m2.patches[patch].surface().control_points().to_vec();
                    cps[local / 3][local % 3] += s;
                    m2.patches[patch].set_control_points(cps).unwrap();
                    m2
                };
                let rp = sys.residual(&perturb(&model, h), &x).unwrap();
                let rm = sys.residual(&perturb(&model, -h), &x).unwrap();
                for row in 0..sys.dim() {
                    let fd = (rp[row] - rm[row]) / (2.0 * h);
                    let v = dense[(row, col)];
                    let scale = v.abs().max(1.0);
                    assert!(
                        (v - fd).abs() <= 1e-5 * scale,
                        "seed {seed} dR/dP ({row},{col}): {v} vs {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let (model, mesh, sys) = crossing_model();
        let x = pack_nodes(&mesh.nodes_a, &mesh.nodes_b);
        assert!(sys.residual(&model, &x[..x.len() - 1]).is_err());
        assert!(sys.solve(&model, &x[..4]).is_err());
    }
}
