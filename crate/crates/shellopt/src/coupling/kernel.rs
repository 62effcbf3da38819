//! Penalty element kernel over the AD scalar trait.
//!
//! One quadrature element contributes
//!
//! `W = w · ( α_d ‖u¹ − u²‖² + α_r ((sinφ − sinφ₀)² + (cosφ − cosφ₀)²) )`
//!
//! with `w` the physical chord length between the element's end nodes on
//! side `a`, `u¹/u²` the midpoint displacements of the two sides, `φ` the
//! dihedral angle between the deformed unit normals (signed through the
//! deformed interface tangent) and `φ₀` its reference value, recomputed
//! from the current control points so geometry derivatives see it.
//!
//! The kernel is written once over [`Scalar`] and seeded three ways:
//! displacements only (residual/stiffness), displacements plus control
//! points (`∂R/∂P`), or displacements plus the eight parametric end-node
//! coordinates (`∂R/∂ξ̃`). Moving parametric coordinates enter the cached
//! basis tables through their second-order Taylor expansion, which is
//! exact for every first- and mixed-second-order derivative read off the
//! seed set.

use super::mesh::{PenaltyElement, PenaltyParams, SideEval};
use crate::ad::{vec3, AdDim, Scalar};
use crate::splines::NurbsSurface;
use crate::{Error, Result};

/// Which variables the element seeds, besides the element's displacement
/// coefficients (always first in the layout).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum SeedMode {
    /// Displacements only.
    Disp,
    /// Displacements, then both sides' control-point coordinates.
    DispCp,
    /// Displacements, then the eight end-node parametric coordinates
    /// `[u_a, v_a, u_b, v_b]` of node `k` followed by node `k+1`.
    DispXi,
}

/// Seed-slot bookkeeping for one element.
pub(crate) struct ElementDims {
    pub n_a: usize,
    pub n_b: usize,
    /// Total displacement slots, `3(n_a + n_b)`; extra seeds follow.
    pub base: usize,
    pub dim: usize,
}

pub(crate) fn element_dims(el: &PenaltyElement, mode: SeedMode) -> ElementDims {
    let n_a = el.support_a.len();
    let n_b = el.support_b.len();
    let base = 3 * (n_a + n_b);
    let dim = match mode {
        SeedMode::Disp => base,
        SeedMode::DispCp => 2 * base,
        SeedMode::DispXi => base + 8,
    };
    ElementDims { n_a, n_b, base, dim }
}

/// Basis tables shifted to a moving parametric point: value and first
/// parametric derivatives of every support function as AD scalars, given
/// pure-offset scalars `du`, `dv` around the cached evaluation point.
fn taylor_tables<S: Scalar>(
    ev: &SideEval,
    du: &S,
    dv: &S,
    moving: bool,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let n = ev.tables[0].len();
    let mut r = Vec::with_capacity(n);
    let mut ru = Vec::with_capacity(n);
    let mut rv = Vec::with_capacity(n);
    if !moving {
        for i in 0..n {
            r.push(S::constant(ev.tables[0][i]));
            ru.push(S::constant(ev.tables[1][i]));
            rv.push(S::constant(ev.tables[2][i]));
        }
        return (r, ru, rv);
    }
    let du2 = du.mul(du);
    let dudv = du.mul(dv);
    let dv2 = dv.mul(dv);
    for i in 0..n {
        let (v, vu, vv, vuu, vuv, vvv) = (
            ev.tables[0][i],
            ev.tables[1][i],
            ev.tables[2][i],
            ev.tables[3][i],
            ev.tables[4][i],
            ev.tables[5][i],
        );
        let mut val = S::constant(v);
        val.add_scaled_assign(du, vu);
        val.add_scaled_assign(dv, vv);
        val.add_scaled_assign(&du2, 0.5 * vuu);
        val.add_scaled_assign(&dudv, vuv);
        val.add_scaled_assign(&dv2, 0.5 * vvv);
        r.push(val);
        let mut dr_u = S::constant(vu);
        dr_u.add_scaled_assign(du, vuu);
        dr_u.add_scaled_assign(dv, vuv);
        ru.push(dr_u);
        let mut dr_v = S::constant(vv);
        dr_v.add_scaled_assign(du, vuv);
        dr_v.add_scaled_assign(dv, vvv);
        rv.push(dr_v);
    }
    (r, ru, rv)
}

/// Sum `Σ c_i · q_{cols(i)}` of vector coefficients against a basis table.
fn combine<S: Scalar>(coeff: &[S], cols: &[usize], q: &[[S; 3]]) -> [S; 3] {
    let mut out = vec3::zero::<S>();
    for (i, c) in coeff.iter().enumerate() {
        let p = &q[cols[i]];
        for k in 0..3 {
            out[k] = out[k].add(&c.mul(&p[k]));
        }
    }
    out
}

fn normalized<S: Scalar>(v: [S; 3], what: &str, el: &PenaltyElement) -> Result<([S; 3], S)> {
    let n = vec3::norm(&v);
    if !(n.value() > 1e-300) || !n.value().is_finite() {
        return Err(Error::InvalidGeometry(format!(
            "degenerate {what} at interface sample a=({:.6}, {:.6})",
            el.mid_a.at.0, el.mid_a.at.1
        )));
    }
    let inv = S::constant(1.0).div(&n);
    Ok((vec3::scale(&v, &inv), n))
}

struct Side<S: Scalar> {
    /// Midpoint displacement.
    u: [S; 3],
    /// Deformed and reference unit normals at the midpoint.
    n_def: [S; 3],
    n_ref: [S; 3],
    /// Covariant tangents, deformed and reference, at the midpoint.
    a_def: [[S; 3]; 2],
    a_ref: [[S; 3]; 2],
}

#[allow(clippy::too_many_arguments)]
fn eval_side<S: Scalar>(
    el: &PenaltyElement,
    ev: &SideEval,
    geom: &[[S; 3]],
    disp: &[[S; 3]],
    du: &S,
    dv: &S,
    moving: bool,
    what: &str,
) -> Result<Side<S>> {
    let (r, ru, rv) = taylor_tables(ev, du, dv, moving);
    let u = combine(&r, &ev.cols, disp);
    let a1_ref = combine(&ru, &ev.cols, geom);
    let a2_ref = combine(&rv, &ev.cols, geom);
    let a1_dsp = combine(&ru, &ev.cols, disp);
    let a2_dsp = combine(&rv, &ev.cols, disp);
    let a1_def = vec3::add(&a1_ref, &a1_dsp);
    let a2_def = vec3::add(&a2_ref, &a2_dsp);
    let (n_ref, _) = normalized(vec3::cross(&a1_ref, &a2_ref), what, el)?;
    let (n_def, _) = normalized(vec3::cross(&a1_def, &a2_def), what, el)?;
    Ok(Side {
        u,
        n_def,
        n_ref,
        a_def: [a1_def, a2_def],
        a_ref: [a1_ref, a2_ref],
    })
}

/// Penalty energy of one quadrature element as an AD scalar.
///
/// `da`/`db` are the patch-local displacement vectors of the two sides.
pub(crate) fn element_energy<S: Scalar>(
    el: &PenaltyElement,
    sa: &NurbsSurface,
    sb: &NurbsSurface,
    da: &[f64],
    db: &[f64],
    params: &PenaltyParams,
    mode: SeedMode,
) -> Result<S> {
    let dims = element_dims(el, mode);
    let ad = AdDim(dims.dim);
    let cps_a = sa.control_points();
    let cps_b = sb.control_points();

    // Seeded coefficient arrays; displacement slots first (side a, then
    // side b), optional geometry slots mirror the displacement layout.
    let seed_cps = mode == SeedMode::DispCp;
    let mut geom_a = Vec::with_capacity(dims.n_a);
    let mut disp_a = Vec::with_capacity(dims.n_a);
    for (i, &g) in el.support_a.iter().enumerate() {
        let mut gv = vec3::zero::<S>();
        let mut dv_ = vec3::zero::<S>();
        for k in 0..3 {
            gv[k] = if seed_cps {
                S::var(cps_a[g][k], dims.base + 3 * i + k, ad)
            } else {
                S::constant(cps_a[g][k])
            };
            dv_[k] = S::var(da[3 * g + k], 3 * i + k, ad);
        }
        geom_a.push(gv);
        disp_a.push(dv_);
    }
    let mut geom_b = Vec::with_capacity(dims.n_b);
    let mut disp_b = Vec::with_capacity(dims.n_b);
    for (i, &g) in el.support_b.iter().enumerate() {
        let mut gv = vec3::zero::<S>();
        let mut dv_ = vec3::zero::<S>();
        for k in 0..3 {
            gv[k] = if seed_cps {
                S::var(cps_b[g][k], dims.base + 3 * (dims.n_a + i) + k, ad)
            } else {
                S::constant(cps_b[g][k])
            };
            dv_[k] = S::var(db[3 * g + k], 3 * (dims.n_a + i) + k, ad);
        }
        geom_b.push(gv);
        disp_b.push(dv_);
    }

    // Parametric end-node coordinates; variables only in xi mode.
    let moving = mode == SeedMode::DispXi;
    let coord = |value: f64, slot: usize| -> S {
        if moving {
            S::var(value, dims.base + slot, ad)
        } else {
            S::constant(value)
        }
    };
    let ua = [coord(el.params_a[0].0, 0), coord(el.params_a[1].0, 4)];
    let va = [coord(el.params_a[0].1, 1), coord(el.params_a[1].1, 5)];
    let ub = [coord(el.params_b[0].0, 2), coord(el.params_b[1].0, 6)];
    let vb = [coord(el.params_b[0].1, 3), coord(el.params_b[1].1, 7)];

    // Pure-offset scalars around the cached table points.
    let offset = |pair: &[S; 2], at: f64| -> S {
        pair[0]
            .add(&pair[1])
            .scale(0.5)
            .sub(&S::constant(at))
    };
    let mid_du_a = offset(&ua, el.mid_a.at.0);
    let mid_dv_a = offset(&va, el.mid_a.at.1);
    let mid_du_b = offset(&ub, el.mid_b.at.0);
    let mid_dv_b = offset(&vb, el.mid_b.at.1);

    let side_a = eval_side(
        el, &el.mid_a, &geom_a, &disp_a, &mid_du_a, &mid_dv_a, moving, "surface tangent",
    )?;
    let side_b = eval_side(
        el, &el.mid_b, &geom_b, &disp_b, &mid_du_b, &mid_dv_b, moving, "surface tangent",
    )?;

    // Displacement gap at the midpoint.
    let gap = vec3::sub(&side_a.u, &side_b.u);
    let gap2 = vec3::dot(&gap, &gap);

    // Interface tangent from side a's parametric direction; normalized in
    // both configurations so only the dihedral angle enters the rotation
    // gap.
    let t_u = ua[1].sub(&ua[0]);
    let t_v = va[1].sub(&va[0]);
    let mut t_ref = vec3::zero::<S>();
    let mut t_def = vec3::zero::<S>();
    for k in 0..3 {
        t_ref[k] = side_a.a_ref[0][k]
            .mul(&t_u)
            .add(&side_a.a_ref[1][k].mul(&t_v));
        t_def[k] = side_a.a_def[0][k]
            .mul(&t_u)
            .add(&side_a.a_def[1][k].mul(&t_v));
    }
    let (t_ref, _) = normalized(t_ref, "interface tangent", el)?;
    let (t_def, _) = normalized(t_def, "interface tangent", el)?;

    let cos0 = vec3::dot(&side_a.n_ref, &side_b.n_ref);
    let sin0 = vec3::dot(&vec3::cross(&side_a.n_ref, &side_b.n_ref), &t_ref);
    let cos = vec3::dot(&side_a.n_def, &side_b.n_def);
    let sin = vec3::dot(&vec3::cross(&side_a.n_def, &side_b.n_def), &t_def);
    let dsin = sin.sub(&sin0);
    let dcos = cos.sub(&cos0);
    let rot = dsin.mul(&dsin).add(&dcos.mul(&dcos));

    // Chord weight from the reference positions of the end nodes (side a).
    let mut ends = Vec::with_capacity(2);
    for (e, ev) in el.end_a.iter().enumerate() {
        let du = ua[e].sub(&S::constant(ev.at.0));
        let dv_ = va[e].sub(&S::constant(ev.at.1));
        let (r, _, _) = taylor_tables(ev, &du, &dv_, moving);
        ends.push(combine(&r, &ev.cols, &geom_a));
    }
    let chord = vec3::sub(&ends[1], &ends[0]);
    let (_, w) = normalized(chord, "interface segment", el)?;

    Ok(w.mul(&gap2.scale(params.alpha_d).add(&rot.scale(params.alpha_r))))
}

/// Map an element displacement slot to `(side_is_b, support index, xyz)`.
pub(crate) fn split_slot(dims: &ElementDims, slot: usize) -> (bool, usize, usize) {
    if slot < 3 * dims.n_a {
        (false, slot / 3, slot % 3)
    } else {
        let s = slot - 3 * dims.n_a;
        (true, s / 3, s % 3)
    }
}
