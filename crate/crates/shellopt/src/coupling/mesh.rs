//! Quadrature meshes along patch intersections.
//!
//! An intersection curve is discretized into a topologically 1D chain of
//! quadrature elements: `m` parametric node pairs (one parametric point on
//! each side per node) connected by `m − 1` segments. Each segment is
//! integrated with the midpoint rule, the weight being the physical chord
//! length between its end nodes evaluated on side `a`. Rational basis
//! tables up to second parametric order are cached for the midpoint on
//! both sides and for the segment end nodes on side `a`, so that penalty
//! kernels can differentiate through moving parametric coordinates.

use std::collections::BTreeSet;

use crate::geometry::MultiPatchModel;
use crate::splines::NurbsSurface;
use crate::{Error, Result};

/// Default dimensionless penalty coefficient.
pub const DEFAULT_PENALTY_COEFFICIENT: f64 = 1e3;

/// Displacement and rotation penalty weights for one intersection.
#[derive(Debug, Clone, Copy)]
pub struct PenaltyParams {
    /// Displacement penalty `c·E·t/h`.
    pub alpha_d: f64,
    /// Rotation penalty `c·E·t³/h`.
    pub alpha_r: f64,
    /// Dimensionless user scale `c`.
    pub coefficient: f64,
}

/// Problem-scaled penalty parameters from material stiffness `e`,
/// thickness `t`, the larger interface-adjacent element size `h` and the
/// dimensionless coefficient `c`.
pub fn penalty_params(e: f64, t: f64, h: f64, c: f64) -> Result<PenaltyParams> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidGeometry(format!(
            "interface element size must be positive and finite, got {h}"
        )));
    }
    if !(e > 0.0) || !(t > 0.0) || !(c >= 0.0) {
        return Err(Error::InvalidGeometry(format!(
            "penalty parameters need E > 0, t > 0, c >= 0; got E={e}, t={t}, c={c}"
        )));
    }
    Ok(PenaltyParams {
        alpha_d: c * e * t / h,
        alpha_r: c * e * t.powi(3) / h,
        coefficient: c,
    })
}

/// One cached basis evaluation on one side: the parametric point, the
/// element-local column slot of every support function, and the six
/// derivative tables `[R, R_u, R_v, R_uu, R_uv, R_vv]`.
#[derive(Debug, Clone)]
pub(crate) struct SideEval {
    pub at: (f64, f64),
    pub cols: Vec<usize>,
    pub tables: [Vec<f64>; 6],
}

/// One quadrature element between nodes `k` and `k + 1`.
#[derive(Debug, Clone)]
pub(crate) struct PenaltyElement {
    /// Index of the lower end node.
    pub k: usize,
    /// Global control-point indices backing the element-local slots,
    /// per side.
    pub support_a: Vec<usize>,
    pub support_b: Vec<usize>,
    /// Midpoint evaluations on both sides.
    pub mid_a: SideEval,
    pub mid_b: SideEval,
    /// End-node evaluations on side `a` (weight chord).
    pub end_a: [SideEval; 2],
    /// Parametric end nodes, `[node k, node k+1]`.
    pub params_a: [(f64, f64); 2],
    pub params_b: [(f64, f64); 2],
}

/// Quadrature data for one intersection, with penalty parameters frozen
/// from the reference configuration at build time.
#[derive(Debug, Clone)]
pub struct QuadratureMesh {
    /// Index into the model's intersection list.
    pub intersection: usize,
    pub patch_a: usize,
    pub patch_b: usize,
    /// Parametric nodes on each side, ordered along the curve.
    pub nodes_a: Vec<(f64, f64)>,
    pub nodes_b: Vec<(f64, f64)>,
    pub params: PenaltyParams,
    pub(crate) elements: Vec<PenaltyElement>,
}

fn eval_side(surface: &NurbsSurface, at: (f64, f64), union: &[usize]) -> SideEval {
    let (support, tables) = surface.rational_basis_derivs(at.0, at.1);
    let cols = support
        .iter()
        .map(|g| union.binary_search(g).expect("support inside union"))
        .collect();
    SideEval { at, cols, tables }
}

fn support_set(surface: &NurbsSurface, at: (f64, f64), into: &mut BTreeSet<usize>) {
    let (ku, kv) = (surface.knots_u(), surface.knots_v());
    let (p, q) = surface.degrees();
    let (su, sv) = (ku.find_span(at.0), kv.find_span(at.1));
    for i in su - p..=su {
        for j in sv - q..=sv {
            into.insert(surface.cp_index(i, j));
        }
    }
}

/// Physical diagonal of the knot-span element containing `at`.
fn element_diagonal(surface: &NurbsSurface, at: (f64, f64)) -> f64 {
    let su = surface.knots_u().find_span(at.0);
    let sv = surface.knots_v().find_span(at.1);
    let ku = surface.knots_u().knots();
    let kv = surface.knots_v().knots();
    let a = surface.eval(ku[su], kv[sv]);
    let b = surface.eval(ku[su + 1], kv[sv + 1]);
    (0..3).map(|k| (b[k] - a[k]).powi(2)).sum::<f64>().sqrt()
}

/// Distinct knot-span elements visited by a parametric sample list.
fn visited_elements(surface: &NurbsSurface, samples: &[(f64, f64)]) -> BTreeSet<(usize, usize)> {
    samples
        .iter()
        .map(|&(u, v)| {
            (
                surface.knots_u().find_span(u),
                surface.knots_v().find_span(v),
            )
        })
        .collect()
}

impl QuadratureMesh {
    /// Build the quadrature mesh for intersection `ix_index`, resampling
    /// the traced polyline at uniform arc length. The node count is
    /// `mortar_resolution × (interface-adjacent spline elements) + 1`, and
    /// the penalty parameters are frozen from the current geometry.
    pub fn build(model: &MultiPatchModel, ix_index: usize, coefficient: f64) -> Result<Self> {
        let ix = model.intersections.get(ix_index).ok_or_else(|| {
            Error::InvalidGeometry(format!(
                "intersection index {ix_index} out of range ({} stored)",
                model.intersections.len()
            ))
        })?;
        if ix.mortar_resolution == 0 {
            return Err(Error::InvalidGeometry(
                "mortar resolution must be at least 1".into(),
            ));
        }
        let pa = &model.patches[ix.patch_a];
        let pb = &model.patches[ix.patch_b];
        let sa = pa.surface();
        let sb = pb.surface();

        // Interface-adjacent element count: the larger of the two sides.
        let els_a = visited_elements(sa, &ix.para_coords_a);
        let els_b = visited_elements(sb, &ix.para_coords_b);
        let n_el = els_a.len().max(els_b.len());
        let m = ix.mortar_resolution * n_el + 1;

        // Uniform arc-length resampling of the traced polyline.
        let phys: Vec<[f64; 3]> = ix
            .para_coords_a
            .iter()
            .map(|&(u, v)| sa.eval(u, v))
            .collect();
        let mut cum = vec![0.0; phys.len()];
        for i in 1..phys.len() {
            let d: f64 = (0..3)
                .map(|k| (phys[i][k] - phys[i - 1][k]).powi(2))
                .sum::<f64>()
                .sqrt();
            cum[i] = cum[i - 1] + d;
        }
        let total = *cum.last().unwrap();
        if !(total > 0.0) {
            return Err(Error::IntersectionFailed(
                "intersection polyline has zero length".into(),
            ));
        }
        let lerp = |a: (f64, f64), b: (f64, f64), t: f64| (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
        let mut nodes_a = Vec::with_capacity(m);
        let mut nodes_b = Vec::with_capacity(m);
        let mut seg = 0usize;
        for k in 0..m {
            let target = total * k as f64 / (m - 1) as f64;
            while seg + 2 < cum.len() && cum[seg + 1] < target {
                seg += 1;
            }
            let len = cum[seg + 1] - cum[seg];
            let t = if len > 0.0 { (target - cum[seg]) / len } else { 0.0 };
            let t = t.clamp(0.0, 1.0);
            nodes_a.push(lerp(ix.para_coords_a[seg], ix.para_coords_a[seg + 1], t));
            nodes_b.push(lerp(ix.para_coords_b[seg], ix.para_coords_b[seg + 1], t));
        }

        // Penalty scale: stiffest/thickest side against the larger
        // adjacent element.
        let e = pa.material().e.max(pb.material().e);
        let t = pa.thickness().max(pb.thickness());
        let mut h: f64 = 0.0;
        for &(su, sv) in &els_a {
            let u = sa.knots_u().knots()[su];
            let v = sa.knots_v().knots()[sv];
            h = h.max(element_diagonal(sa, (u, v)));
        }
        for &(su, sv) in &els_b {
            let u = sb.knots_u().knots()[su];
            let v = sb.knots_v().knots()[sv];
            h = h.max(element_diagonal(sb, (u, v)));
        }
        let params = penalty_params(e, t, h, coefficient)?;

        let elements = build_elements(sa, sb, &nodes_a, &nodes_b)?;
        Ok(QuadratureMesh {
            intersection: ix_index,
            patch_a: ix.patch_a,
            patch_b: ix.patch_b,
            nodes_a,
            nodes_b,
            params,
            elements,
        })
    }

    /// Replace the parametric nodes (moving-intersection mode) and rebuild
    /// every cached table. Penalty parameters stay frozen.
    pub fn rebuild(
        &mut self,
        model: &MultiPatchModel,
        nodes_a: Vec<(f64, f64)>,
        nodes_b: Vec<(f64, f64)>,
    ) -> Result<()> {
        if nodes_a.len() != self.nodes_a.len() || nodes_b.len() != self.nodes_b.len() {
            return Err(Error::DimensionMismatch(format!(
                "quadrature mesh has {} nodes per side, got {} / {}",
                self.nodes_a.len(),
                nodes_a.len(),
                nodes_b.len()
            )));
        }
        let sa = model.patches[self.patch_a].surface();
        let sb = model.patches[self.patch_b].surface();
        self.elements = build_elements(sa, sb, &nodes_a, &nodes_b)?;
        self.nodes_a = nodes_a;
        self.nodes_b = nodes_b;
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes_a.len()
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    /// Midpoint-rule weights: the physical chord length of every segment,
    /// evaluated from the cached side-`a` tables.
    pub fn weights(&self, model: &MultiPatchModel) -> Vec<f64> {
        let cps = model.patches[self.patch_a].surface().control_points();
        self.elements
            .iter()
            .map(|el| {
                let x = |ev: &SideEval| {
                    let mut p = [0.0; 3];
                    for (i, &c) in ev.cols.iter().enumerate() {
                        let gi = el.support_a[c];
                        for k in 0..3 {
                            p[k] += ev.tables[0][i] * cps[gi][k];
                        }
                    }
                    p
                };
                let p0 = x(&el.end_a[0]);
                let p1 = x(&el.end_a[1]);
                (0..3).map(|k| (p1[k] - p0[k]).powi(2)).sum::<f64>().sqrt()
            })
            .collect()
    }

    /// Physical chord length of the node polyline on side `a`, evaluated
    /// directly from the surface (reference for the weight-sum invariant).
    pub fn chord_length(&self, model: &MultiPatchModel) -> f64 {
        let s = model.patches[self.patch_a].surface();
        let pts: Vec<[f64; 3]> = self.nodes_a.iter().map(|&(u, v)| s.eval(u, v)).collect();
        pts.windows(2)
            .map(|w| (0..3).map(|k| (w[1][k] - w[0][k]).powi(2)).sum::<f64>().sqrt())
            .sum()
    }
}

fn build_elements(
    sa: &NurbsSurface,
    sb: &NurbsSurface,
    nodes_a: &[(f64, f64)],
    nodes_b: &[(f64, f64)],
) -> Result<Vec<PenaltyElement>> {
    if nodes_a.len() != nodes_b.len() || nodes_a.len() < 2 {
        return Err(Error::DimensionMismatch(format!(
            "quadrature mesh needs matched node lists with at least two nodes, got {} / {}",
            nodes_a.len(),
            nodes_b.len()
        )));
    }
    let mut out = Vec::with_capacity(nodes_a.len() - 1);
    for k in 0..nodes_a.len() - 1 {
        let (a0, a1) = (nodes_a[k], nodes_a[k + 1]);
        let (b0, b1) = (nodes_b[k], nodes_b[k + 1]);
        let mid_a = ((a0.0 + a1.0) * 0.5, (a0.1 + a1.1) * 0.5);
        let mid_b = ((b0.0 + b1.0) * 0.5, (b0.1 + b1.1) * 0.5);

        let mut ua = BTreeSet::new();
        support_set(sa, mid_a, &mut ua);
        support_set(sa, a0, &mut ua);
        support_set(sa, a1, &mut ua);
        let support_a: Vec<usize> = ua.into_iter().collect();
        let mut ub = BTreeSet::new();
        support_set(sb, mid_b, &mut ub);
        let support_b: Vec<usize> = ub.into_iter().collect();

        out.push(PenaltyElement {
            k,
            mid_a: eval_side(sa, mid_a, &support_a),
            mid_b: eval_side(sb, mid_b, &support_b),
            end_a: [eval_side(sa, a0, &support_a), eval_side(sa, a1, &support_a)],
            params_a: [a0, a1],
            params_b: [b0, b1],
            support_a,
            support_b,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intersection, IntersectionKind};
    use crate::shell::{Material, ShellPatch};
    use crate::splines::NurbsSurface;
    use approx::assert_relative_eq;

    fn flat(x0: f64, x1: f64, nel: usize) -> ShellPatch {
        let s = NurbsSurface::bilinear(
            [x0, 0.0, 0.0],
            [x1, 0.0, 0.0],
            [x0, 1.0, 0.0],
            [x1, 1.0, 0.0],
        );
        let s = crate::splines::elevate_degree(&s, 1, 1).unwrap().surface;
        let s = crate::splines::refine_knots(
            &s,
            &(1..nel).map(|i| i as f64 / nel as f64).collect::<Vec<_>>(),
            &[0.25, 0.5, 0.75],
        )
        .unwrap()
        .surface;
        ShellPatch::new(s, 0.01, Material::new(1e9, 0.3).unwrap()).unwrap()
    }

    fn shared_edge_model() -> MultiPatchModel {
        let mut model = MultiPatchModel::new(vec![flat(0.0, 1.0, 2), flat(1.0, 2.0, 3)]);
        model.detect_intersections(24).unwrap();
        assert_eq!(model.intersections.len(), 1);
        model
    }

    #[test]
    fn penalty_params_formula_and_scaling() {
        let p = penalty_params(1e12, 0.01, 0.5, 1e3).unwrap();
        assert_relative_eq!(p.alpha_d, 1e3 * 1e12 * 0.01 / 0.5, max_relative = 1e-14);
        assert_relative_eq!(p.alpha_r, 1e3 * 1e12 * 1e-6 / 0.5, max_relative = 1e-14);
        assert!(p.alpha_d > 0.0 && p.alpha_d.is_finite());
        assert!(p.alpha_r > 0.0 && p.alpha_r.is_finite());

        let doubled = penalty_params(1e12, 0.01, 1.0, 1e3).unwrap();
        assert_relative_eq!(doubled.alpha_d, p.alpha_d / 2.0, max_relative = 1e-14);
        assert_relative_eq!(doubled.alpha_r, p.alpha_r / 2.0, max_relative = 1e-14);

        assert!(penalty_params(1e12, 0.01, 0.0, 1e3).is_err());
        assert!(penalty_params(-1.0, 0.01, 0.5, 1e3).is_err());
    }

    #[test]
    fn mesh_node_count_follows_mortar_resolution() {
        let model = shared_edge_model();
        let mesh = QuadratureMesh::build(&model, 0, 1e3).unwrap();
        // The interface runs along the second patch's full v-range: three
        // elements on the finer side, mortar resolution 2.
        let n_el = 4usize; // v-knots at 0.25, 0.5, 0.75 insert 4 spans
        assert_eq!(mesh.num_nodes(), 2 * n_el + 1);
        assert_eq!(mesh.num_elements(), mesh.num_nodes() - 1);
        assert_eq!(mesh.patch_a, 0);
        assert_eq!(mesh.patch_b, 1);
    }

    #[test]
    fn weights_sum_to_interface_chord_length() {
        let model = shared_edge_model();
        let mesh = QuadratureMesh::build(&model, 0, 1e3).unwrap();
        let w = mesh.weights(&model);
        assert_eq!(w.len(), mesh.num_elements());
        let total: f64 = w.iter().sum();
        assert_relative_eq!(total, mesh.chord_length(&model), max_relative = 1e-8);
        // Straight unit interface: the chord length is exactly 1.
        assert_relative_eq!(total, 1.0, max_relative = 1e-10);
        // Uniform arc-length resampling on a straight segment gives equal
        // weights.
        for &wi in &w {
            assert_relative_eq!(wi, 1.0 / w.len() as f64, max_relative = 1e-8);
        }
    }

    #[test]
    fn rebuild_swaps_nodes_and_validates_length() {
        let model = shared_edge_model();
        let mut mesh = QuadratureMesh::build(&model, 0, 1e3).unwrap();
        let mut na = mesh.nodes_a.clone();
        let nb = mesh.nodes_b.clone();
        na[1].1 += 0.01;
        mesh.rebuild(&model, na.clone(), nb.clone()).unwrap();
        assert_eq!(mesh.nodes_a[1], na[1]);
        assert!(mesh
            .rebuild(&model, na[..3].to_vec(), nb)
            .is_err());
    }

    #[test]
    fn manual_intersection_feeds_mesh() {
        let mut model = MultiPatchModel::new(vec![flat(0.0, 1.0, 2), flat(1.0, 2.0, 3)]);
        let samples_a: Vec<(f64, f64)> = (0..9).map(|i| (1.0, i as f64 / 8.0)).collect();
        let samples_b: Vec<(f64, f64)> = (0..9).map(|i| (0.0, i as f64 / 8.0)).collect();
        model
            .add_intersection(
                Intersection::new(0, 1, samples_a, samples_b, IntersectionKind::EdgeFixed)
                    .unwrap(),
            )
            .unwrap();
        let mesh = QuadratureMesh::build(&model, 0, 1e3).unwrap();
        assert!(mesh.num_nodes() >= 2);
        assert!(mesh.params.alpha_d > 0.0);
    }
}
