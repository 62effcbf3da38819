use super::{KnotVector, NurbsSurface};
use crate::{Error, Result};
use nalgebra::DMatrix;

/// Coefficient transfer between nested B-spline spaces on the same domain.
///
/// The matrix `T` (new basis count x old basis count) re-expresses any spline
/// with coefficients `c` in the old space as `T c` in the new space. It is
/// computed by collocation at the Greville abscissae of the new space, which
/// is exact whenever the old space is contained in the new one; containment
/// is verified by reproduction checks and violated inputs are rejected.
pub fn transfer_matrix_1d(old: &KnotVector, new: &KnotVector) -> Result<DMatrix<f64>> {
    let (oa, ob) = old.domain();
    let (na, nb) = new.domain();
    if (oa - na).abs() > 1e-12 * (ob - oa).abs() || (ob - nb).abs() > 1e-12 * (ob - oa).abs() {
        return Err(Error::InvalidKnots(format!(
            "transfer requires matching domains: [{oa}, {ob}] vs [{na}, {nb}]"
        )));
    }
    if new.degree() < old.degree() {
        return Err(Error::InvalidKnots(
            "target space must have degree at least that of the source".into(),
        ));
    }
    let n_new = new.num_basis();
    let n_old = old.num_basis();
    let tau = spread_duplicates(new.greville(), na, nb);

    let collocation = |k: &KnotVector, cols: usize| {
        let p = k.degree();
        let mut m = DMatrix::zeros(tau.len(), cols);
        for (r, &t) in tau.iter().enumerate() {
            let (span, vals) = k.basis_values(t);
            for (j, &v) in vals.iter().enumerate() {
                m[(r, span - p + j)] = v;
            }
        }
        m
    };
    let a = collocation(new, n_new);
    let b = collocation(old, n_old);
    let t = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::InvalidKnots("singular collocation system".into()))?;

    // Containment check: every old basis function must be reproduced by its
    // transferred coefficients at points the collocation never saw.
    let (dom_a, dom_b) = (na, nb);
    for s in 0..7 {
        let x = dom_a + (dom_b - dom_a) * (0.08 + 0.14 * s as f64);
        let (span_o, vo) = old.basis_values(x);
        let (span_n, vn) = new.basis_values(x);
        for i in 0..n_old {
            let exact = if i + old.degree() >= span_o && i <= span_o {
                vo[i + old.degree() - span_o]
            } else {
                0.0
            };
            let mut approx = 0.0;
            for (j, &v) in vn.iter().enumerate() {
                approx += t[(span_n - new.degree() + j, i)] * v;
            }
            if (approx - exact).abs() > 1e-8 {
                return Err(Error::InvalidKnots(
                    "target space does not contain the source space".into(),
                ));
            }
        }
    }
    Ok(t)
}

/// Greville abscissae coincide where an interior knot reaches the degree's
/// multiplicity; spread such runs slightly so the collocation matrix stays
/// non-singular (any interpolation points work — exactness is independent
/// of the choice).
fn spread_duplicates(mut tau: Vec<f64>, lo: f64, hi: f64) -> Vec<f64> {
    let scale = hi - lo;
    let mut i = 0;
    while i < tau.len() {
        let mut j = i + 1;
        while j < tau.len() && (tau[j] - tau[i]).abs() < 1e-12 * scale {
            j += 1;
        }
        let run = j - i;
        if run > 1 {
            let prev_gap = if i == 0 { tau[i] - lo } else { tau[i] - tau[i - 1] };
            let next_gap = if j == tau.len() { hi - tau[i] } else { tau[j] - tau[i] };
            let delta = 0.25 * prev_gap.max(1e-12 * scale).min(next_gap.max(1e-12 * scale))
                / run as f64;
            let delta = if delta > 0.0 { delta } else { 1e-9 * scale };
            for (k, t) in tau[i..j].iter_mut().enumerate() {
                *t += delta * (k as f64 - (run - 1) as f64 / 2.0);
                *t = t.clamp(lo, hi);
            }
        }
        i = j;
    }
    tau
}

/// Raise every knot multiplicity by `t`, producing the standard
/// continuity-preserving degree-elevated knot vector.
fn elevated_knots(k: &KnotVector, t: usize) -> Result<KnotVector> {
    let mut knots = Vec::new();
    let mut i = 0;
    let src = k.knots();
    while i < src.len() {
        let mut j = i + 1;
        while j < src.len() && src[j] == src[i] {
            j += 1;
        }
        for _ in 0..(j - i + t) {
            knots.push(src[i]);
        }
        i = j;
    }
    KnotVector::new(k.degree() + t, knots)
}

fn inserted_knots(k: &KnotVector, add: &[f64]) -> Result<KnotVector> {
    let (a, b) = k.domain();
    for &x in add {
        if !(x > a && x < b) {
            return Err(Error::InvalidKnots(format!(
                "inserted knot {x} outside the open domain ({a}, {b})"
            )));
        }
    }
    let mut knots = k.knots().to_vec();
    knots.extend_from_slice(add);
    knots.sort_by(|x, y| x.partial_cmp(y).unwrap());
    KnotVector::new(k.degree(), knots)
}

/// A refined or elevated surface together with the per-direction transfer
/// matrices relating old to new control points.
#[derive(Debug, Clone)]
pub struct SurfaceTransfer {
    pub surface: NurbsSurface,
    pub tu: DMatrix<f64>,
    pub tv: DMatrix<f64>,
    old_weights: Vec<f64>,
    old_nv: usize,
}

impl SurfaceTransfer {
    fn build(old: &NurbsSurface, ku_new: KnotVector, kv_new: KnotVector) -> Result<Self> {
        let tu = transfer_matrix_1d(old.knots_u(), &ku_new)?;
        let tv = transfer_matrix_1d(old.knots_v(), &kv_new)?;
        let (nu_new, nv_new) = (ku_new.num_basis(), kv_new.num_basis());
        let (nu_old, nv_old) = (old.num_u(), old.num_v());

        // Transfer in homogeneous coordinates: (w, w x, w y, w z).
        let mut hom = DMatrix::zeros(nu_old * nv_old, 4);
        for i in 0..nu_old {
            for j in 0..nv_old {
                let idx = old.cp_index(i, j);
                let w = old.weights()[idx];
                let p = old.control_points()[idx];
                hom[(idx, 0)] = w;
                for d in 0..3 {
                    hom[(idx, d + 1)] = w * p[d];
                }
            }
        }
        let hom_new = apply_kron(&tu, &tv, &hom, nu_old, nv_old, nu_new, nv_new);

        let mut weights = Vec::with_capacity(nu_new * nv_new);
        let mut cps = Vec::with_capacity(nu_new * nv_new);
        for r in 0..nu_new * nv_new {
            let w = hom_new[(r, 0)];
            if !(w > 0.0) {
                return Err(Error::InvalidGeometry(
                    "transfer produced a non-positive weight".into(),
                ));
            }
            weights.push(w);
            cps.push([
                hom_new[(r, 1)] / w,
                hom_new[(r, 2)] / w,
                hom_new[(r, 3)] / w,
            ]);
        }
        let surface = NurbsSurface::new(ku_new, kv_new, cps, weights)?;
        Ok(SurfaceTransfer {
            surface,
            tu,
            tv,
            old_weights: old.weights().to_vec(),
            old_nv: nv_old,
        })
    }

    /// Entry of the linear map from old to new control-point coordinates
    /// (identical for x, y and z; weights are fixed data).
    pub fn cp_coefficient(&self, new_flat: usize, old_flat: usize) -> f64 {
        let nv_new = self.surface.num_v();
        let (i_new, j_new) = (new_flat / nv_new, new_flat % nv_new);
        let (i_old, j_old) = (old_flat / self.old_nv, old_flat % self.old_nv);
        self.tu[(i_new, i_old)] * self.tv[(j_new, j_old)] * self.old_weights[old_flat]
            / self.surface.weights()[new_flat]
    }

    /// Re-apply the transfer to a displaced set of old control points.
    pub fn apply_cps(&self, old_cps: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let n_new = self.surface.num_cps();
        let n_old = old_cps.len();
        let mut out = vec![[0.0; 3]; n_new];
        for (r, o) in out.iter_mut().enumerate() {
            for c in 0..n_old {
                let t = self.cp_coefficient(r, c);
                if t != 0.0 {
                    for d in 0..3 {
                        o[d] += t * old_cps[c][d];
                    }
                }
            }
        }
        out
    }
}

fn apply_kron(
    tu: &DMatrix<f64>,
    tv: &DMatrix<f64>,
    data: &DMatrix<f64>,
    nu_old: usize,
    nv_old: usize,
    nu_new: usize,
    nv_new: usize,
) -> DMatrix<f64> {
    let cols = data.ncols();
    // First along v for each old u-row, then along u.
    let mut mid = DMatrix::<f64>::zeros(nu_old * nv_new, cols);
    for i in 0..nu_old {
        for jn in 0..nv_new {
            for jo in 0..nv_old {
                let t = tv[(jn, jo)];
                if t != 0.0 {
                    for c in 0..cols {
                        mid[(i * nv_new + jn, c)] += t * data[(i * nv_old + jo, c)];
                    }
                }
            }
        }
    }
    let mut out = DMatrix::zeros(nu_new * nv_new, cols);
    for inw in 0..nu_new {
        for io in 0..nu_old {
            let t = tu[(inw, io)];
            if t != 0.0 {
                for j in 0..nv_new {
                    for c in 0..cols {
                        out[(inw * nv_new + j, c)] += t * mid[(io * nv_new + j, c)];
                    }
                }
            }
        }
    }
    out
}

/// Degree-elevate a surface by `(du, dv)`, preserving the geometry exactly.
pub fn elevate_degree(surface: &NurbsSurface, du: usize, dv: usize) -> Result<SurfaceTransfer> {
    let ku_new = elevated_knots(surface.knots_u(), du)?;
    let kv_new = elevated_knots(surface.knots_v(), dv)?;
    SurfaceTransfer::build(surface, ku_new, kv_new)
}

/// Insert knots (interior, strictly inside the domain) in each direction,
/// preserving the geometry exactly.
pub fn refine_knots(surface: &NurbsSurface, add_u: &[f64], add_v: &[f64]) -> Result<SurfaceTransfer> {
    let ku_new = inserted_knots(surface.knots_u(), add_u)?;
    let kv_new = inserted_knots(surface.knots_v(), add_v)?;
    SurfaceTransfer::build(surface, ku_new, kv_new)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn sample_surface() -> NurbsSurface {
        // Rational quarter-cylinder strip: exercises non-unit weights.
        let ku = KnotVector::new(2, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let kv = KnotVector::new(1, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        NurbsSurface::new(
            ku,
            kv,
            vec![
                [1.0, 0.0, 0.0],
                [1.0, 0.0, 2.0],
                [1.0, 1.0, 0.0],
                [1.0, 1.0, 2.0],
                [0.0, 1.0, 0.0],
                [0.0, 1.0, 2.0],
            ],
            vec![1.0, 1.0, s, s, 1.0, 1.0],
        )
        .unwrap()
    }

    fn max_eval_gap(a: &NurbsSurface, b: &NurbsSurface) -> f64 {
        let mut worst: f64 = 0.0;
        for iu in 0..=10 {
            for iv in 0..=6 {
                let (u, v) = (iu as f64 / 10.0, iv as f64 / 6.0);
                let xa = a.eval(u, v);
                let xb = b.eval(u, v);
                for d in 0..3 {
                    worst = worst.max((xa[d] - xb[d]).abs());
                }
            }
        }
        worst
    }

    #[test]
    fn elevation_preserves_geometry() {
        let s = sample_surface();
        let t = elevate_degree(&s, 1, 2).unwrap();
        assert_eq!(t.surface.degrees(), (3, 3));
        assert!(max_eval_gap(&s, &t.surface) < 1e-12);
    }

    #[test]
    fn refinement_preserves_geometry() {
        let s = sample_surface();
        let t = refine_knots(&s, &[0.25, 0.5, 0.75], &[0.5]).unwrap();
        assert_eq!(t.surface.num_u(), 6);
        assert_eq!(t.surface.num_v(), 3);
        assert!(max_eval_gap(&s, &t.surface) < 1e-12);
    }

    #[test]
    fn chained_elevation_then_refinement() {
        let s = sample_surface();
        let t1 = elevate_degree(&s, 1, 0).unwrap();
        let t2 = refine_knots(&t1.surface, &[1.0 / 3.0, 2.0 / 3.0], &[0.5]).unwrap();
        assert!(max_eval_gap(&s, &t2.surface) < 1e-12);
    }

    #[test]
    fn transfer_tracks_moved_control_points() {
        // Moving the old control points and re-applying the transfer must
        // agree with rebuilding the refined surface from scratch.
        let s = sample_surface();
        let t = refine_knots(&s, &[0.4], &[]).unwrap();
        let mut moved = s.control_points().to_vec();
        for (k, cp) in moved.iter_mut().enumerate() {
            cp[0] += 0.01 * (k as f64 + 1.0);
            cp[2] -= 0.02 * (k as f64);
        }
        let new_cps = t.apply_cps(&moved);
        let s_moved = s.with_control_points(moved).unwrap();
        let rebuilt = refine_knots(&s_moved, &[0.4], &[]).unwrap();
        for (a, b) in new_cps.iter().zip(rebuilt.surface.control_points()) {
            for d in 0..3 {
                assert_relative_eq!(a[d], b[d], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rejects_non_nested_target() {
        let s = sample_surface();
        let refined = refine_knots(&s, &[0.5], &[]).unwrap();
        // Coarse target cannot represent the refined space.
        let err = transfer_matrix_1d(refined.surface.knots_u(), s.knots_u());
        assert!(err.is_err());
    }

    #[test]
    fn rejects_outside_domain_insertion() {
        let s = sample_surface();
        assert!(refine_knots(&s, &[1.5], &[]).is_err());
        assert!(refine_knots(&s, &[0.0], &[]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn random_refinement_is_exact(
            knot1 in 0.05f64..0.95,
            knot2 in 0.05f64..0.95,
            du in 0usize..=2,
        ) {
            prop_assume!((knot1 - knot2).abs() > 1e-3);
            let s = sample_surface();
            let t1 = elevate_degree(&s, du, du).unwrap();
            let t2 = refine_knots(&t1.surface, &[knot1, knot2], &[knot1]).unwrap();
            prop_assert!(max_eval_gap(&s, &t2.surface) < 1e-12);
        }

        #[test]
        fn transfer_rows_sum_to_one(extra in 0.1f64..0.9) {
            // Affine invariance: each new control point is an affine
            // combination of old ones.
            let s = sample_surface();
            let t = refine_knots(&s, &[extra], &[]).unwrap();
            let n_old = s.num_cps();
            for r in 0..t.surface.num_cps() {
                let sum: f64 = (0..n_old).map(|c| {
                    // Undo the weight scaling to test the B-spline operator.
                    t.cp_coefficient(r, c) * t.surface.weights()[r] / s.weights()[c]
                }).sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }
}
