use super::material::Material;
use super::patch::{LoadCase, QpTables};
use crate::ad::{vec3, Scalar};
use crate::splines::NurbsSurface;
use crate::{Error, Result};

/// Curvilinear shell state at one surface point.
#[derive(Debug, Clone)]
pub struct Kinematics {
    pub a_ref: [[f64; 3]; 2],
    pub a_def: [[f64; 3]; 2],
    pub n_ref: [f64; 3],
    pub n_def: [f64; 3],
    /// Covariant metrics `[g11, g22, g12]`.
    pub metric_ref: [f64; 3],
    pub metric_def: [f64; 3],
    /// Curvature tensors `[b11, b22, b12]`.
    pub curv_ref: [f64; 3],
    pub curv_def: [f64; 3],
    /// Membrane strain, Voigt `[e11, e22, 2 e12]`.
    pub strain: [f64; 3],
    /// Curvature change, Voigt `[k11, k22, 2 k12]`.
    pub curvature_change: [f64; 3],
}

/// First and second covariant surface data for one configuration.
struct SurfaceState<S: Scalar> {
    a1: [S; 3],
    a2: [S; 3],
    /// Unnormalized normal `a1 x a2` and its length (surface Jacobian).
    n_raw: [S; 3],
    jac: S,
    n_unit: [S; 3],
    /// `[g11, g22, g12]`.
    metric: [S; 3],
    /// `[b11, b22, b12]` with `b_ab = x_,ab · n_unit`.
    curv: [S; 3],
}

fn surface_state<S: Scalar>(t: &QpTables, pts: &[[S; 3]]) -> Result<SurfaceState<S>> {
    let mut a1 = vec3::zero::<S>();
    let mut a2 = vec3::zero::<S>();
    let mut d11 = vec3::zero::<S>();
    let mut d22 = vec3::zero::<S>();
    let mut d12 = vec3::zero::<S>();
    for (i, p) in pts.iter().enumerate() {
        let (ru, rv) = (t.r[1][i], t.r[2][i]);
        let (ruu, ruv, rvv) = (t.r[3][i], t.r[4][i], t.r[5][i]);
        for d in 0..3 {
            a1[d].add_scaled_assign(&p[d], ru);
            a2[d].add_scaled_assign(&p[d], rv);
            d11[d].add_scaled_assign(&p[d], ruu);
            d12[d].add_scaled_assign(&p[d], ruv);
            d22[d].add_scaled_assign(&p[d], rvv);
        }
    }
    let n_raw = vec3::cross(&a1, &a2);
    let jac = vec3::norm(&n_raw);
    if !(jac.value() > 1e-300) {
        return Err(Error::InvalidGeometry(
            "degenerate surface metric (zero Jacobian) at a quadrature point".into(),
        ));
    }
    let n_unit = [
        n_raw[0].div(&jac),
        n_raw[1].div(&jac),
        n_raw[2].div(&jac),
    ];
    let metric = [
        vec3::dot(&a1, &a1),
        vec3::dot(&a2, &a2),
        vec3::dot(&a1, &a2),
    ];
    let curv = [
        vec3::dot(&d11, &n_unit),
        vec3::dot(&d22, &n_unit),
        vec3::dot(&d12, &n_unit),
    ];
    Ok(SurfaceState {
        a1,
        a2,
        n_raw,
        jac,
        n_unit,
        metric,
        curv,
    })
}

/// Contravariant plane-stress material matrix in Voigt order
/// `[11, 22, 12]` (columns act on strain with doubled shear):
/// `C^{abcd} = λ̄ A^{ab}A^{cd} + μ (A^{ac}A^{bd} + A^{ad}A^{bc})`.
fn material_matrix<S: Scalar>(metric: &[S; 3], mat: &Material) -> Result<[[S; 3]; 3]> {
    let (lam, mu) = mat.plane_stress_lame();
    let det = metric[0]
        .mul(&metric[1])
        .sub(&metric[2].mul(&metric[2]));
    if !(det.value() > 0.0) {
        return Err(Error::InvalidGeometry(
            "indefinite surface metric at a quadrature point".into(),
        ));
    }
    let c11 = metric[1].div(&det); // A^{11}
    let c22 = metric[0].div(&det); // A^{22}
    let c12 = metric[2].div(&det).neg(); // A^{12}

    let c0000 = c11.mul(&c11).scale(lam + 2.0 * mu);
    let c0011 = c11.mul(&c22).scale(lam).add(&c12.mul(&c12).scale(2.0 * mu));
    let c0001 = c11.mul(&c12).scale(lam + 2.0 * mu);
    let c1111 = c22.mul(&c22).scale(lam + 2.0 * mu);
    let c1101 = c22.mul(&c12).scale(lam + 2.0 * mu);
    let c0101 = c12
        .mul(&c12)
        .scale(lam)
        .add(&c11.mul(&c22).add(&c12.mul(&c12)).scale(mu));
    Ok([
        [c0000, c0011.clone(), c0001.clone()],
        [c0011, c1111, c1101.clone()],
        [c0001, c1101, c0101],
    ])
}

fn mat3_vec<S: Scalar>(m: &[[S; 3]; 3], v: &[S; 3]) -> [S; 3] {
    let mut out = vec3::zero::<S>();
    for (o, row) in out.iter_mut().zip(m.iter()) {
        *o = vec3::dot(row, v);
    }
    out
}

/// Internal and external potential densities at one quadrature point.
///
/// Returns `(W_int_qp, W_ext_qp)` already multiplied by the parametric
/// quadrature weight; the total potential contribution is their difference.
pub(crate) fn qp_potential<S: Scalar>(
    t: &QpTables,
    geom: &[[S; 3]],
    disp: &[[S; 3]],
    mat: &Material,
    thickness: f64,
    loads: &[LoadCase],
) -> Result<(S, S)> {
    let deformed: Vec<[S; 3]> = geom
        .iter()
        .zip(disp)
        .map(|(g, d)| vec3::add(g, d))
        .collect();
    let reference = surface_state(t, geom)?;
    let current = surface_state(t, &deformed)?;

    // Membrane strain and curvature change, Voigt with doubled shear.
    let strain = [
        current.metric[0].sub(&reference.metric[0]).scale(0.5),
        current.metric[1].sub(&reference.metric[1]).scale(0.5),
        current.metric[2].sub(&reference.metric[2]),
    ];
    let curvature = [
        reference.curv[0].sub(&current.curv[0]),
        reference.curv[1].sub(&current.curv[1]),
        reference.curv[2].sub(&current.curv[2]).scale(2.0),
    ];

    let c = material_matrix(&reference.metric, mat)?;
    let n_res = mat3_vec(&c, &strain);
    let m_res = mat3_vec(&c, &curvature);
    let t3 = thickness * thickness * thickness / 12.0;
    let density = vec3::dot(&n_res, &strain)
        .scale(thickness)
        .add(&vec3::dot(&m_res, &curvature).scale(t3))
        .scale(0.5);
    let w_int = density.mul(&reference.jac).scale(t.weight);

    // External load potential.
    let mut w_ext = S::zero();
    if !loads.is_empty() {
        // Midsurface displacement at the point.
        let mut u = vec3::zero::<S>();
        for (i, d) in disp.iter().enumerate() {
            let rv = t.r[0][i];
            for k in 0..3 {
                u[k].add_scaled_assign(&d[k], rv);
            }
        }
        for load in loads {
            let contrib = match load {
                LoadCase::Dead { force_per_area } => {
                    let f = [
                        S::constant(force_per_area[0]),
                        S::constant(force_per_area[1]),
                        S::constant(force_per_area[2]),
                    ];
                    vec3::dot(&f, &u).mul(&reference.jac)
                }
                LoadCase::NormalPressure {
                    magnitude,
                    follower,
                } => {
                    if *follower {
                        // Swept-volume potential p/3 (x·(x,1 x x,2) − X·(X,1 x X,2)):
                        // its displacement gradient is the deformed-normal
                        // pressure for fixed or closed boundaries.
                        let mut x = vec3::zero::<S>();
                        let mut xr = vec3::zero::<S>();
                        for (i, (p, g)) in deformed.iter().zip(geom).enumerate() {
                            let rv = t.r[0][i];
                            for k in 0..3 {
                                x[k].add_scaled_assign(&p[k], rv);
                                xr[k].add_scaled_assign(&g[k], rv);
                            }
                        }
                        vec3::dot(&x, &current.n_raw)
                            .sub(&vec3::dot(&xr, &reference.n_raw))
                            .scale(magnitude / 3.0)
                    } else {
                        vec3::dot(&reference.n_unit, &u)
                            .scale(*magnitude)
                            .mul(&reference.jac)
                    }
                }
                LoadCase::ProjectedPressure {
                    magnitude,
                    direction,
                } => {
                    let e = [
                        S::constant(direction[0]),
                        S::constant(direction[1]),
                        S::constant(direction[2]),
                    ];
                    vec3::dot(&reference.n_unit, &e)
                        .mul(&vec3::dot(&e, &u))
                        .scale(-magnitude)
                        .mul(&reference.jac)
                }
            };
            w_ext.add_scaled_assign(&contrib, t.weight);
        }
    }
    Ok((w_int, w_ext))
}

/// Pointwise kinematic quantities of a displaced surface (plain-value
/// specialization of the energy kernel's internals).
pub fn kinematics_at(
    surface: &NurbsSurface,
    u: f64,
    v: f64,
    disp_coeffs: &[[f64; 3]],
) -> Result<Kinematics> {
    if disp_coeffs.len() != surface.num_cps() {
        return Err(Error::DimensionMismatch(format!(
            "displacement field has {} coefficients, surface has {} control points",
            disp_coeffs.len(),
            surface.num_cps()
        )));
    }
    let (idx, tables) = surface.rational_basis_derivs(u, v);
    let t = QpTables {
        weight: 1.0,
        r: tables,
    };
    let geom: Vec<[f64; 3]> = idx.iter().map(|&i| surface.control_points()[i]).collect();
    let disp: Vec<[f64; 3]> = idx.iter().map(|&i| disp_coeffs[i]).collect();
    let deformed: Vec<[f64; 3]> = geom
        .iter()
        .zip(&disp)
        .map(|(g, d)| vec3::add(g, d))
        .collect();
    let r = surface_state::<f64>(&t, &geom)?;
    let c = surface_state::<f64>(&t, &deformed)?;
    Ok(Kinematics {
        a_ref: [r.a1, r.a2],
        a_def: [c.a1, c.a2],
        n_ref: r.n_unit,
        n_def: c.n_unit,
        metric_ref: r.metric,
        metric_def: c.metric,
        curv_ref: r.curv,
        curv_def: c.curv,
        strain: [
            0.5 * (c.metric[0] - r.metric[0]),
            0.5 * (c.metric[1] - r.metric[1]),
            c.metric[2] - r.metric[2],
        ],
        curvature_change: [
            r.curv[0] - c.curv[0],
            r.curv[1] - c.curv[1],
            2.0 * (r.curv[2] - c.curv[2]),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splines::KnotVector;
    use approx::assert_relative_eq;

    fn quarter_cylinder(r: f64, h: f64) -> NurbsSurface {
        let ku = KnotVector::new(2, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let kv = KnotVector::new(1, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        NurbsSurface::new(
            ku,
            kv,
            vec![
                [r, 0.0, 0.0],
                [r, 0.0, h],
                [r, r, 0.0],
                [r, r, h],
                [0.0, r, 0.0],
                [0.0, r, h],
            ],
            vec![1.0, 1.0, s, s, 1.0, 1.0],
        )
        .unwrap()
    }

    #[test]
    fn zero_displacement_zero_strain() {
        let surf = quarter_cylinder(2.0, 3.0);
        let zero = vec![[0.0; 3]; surf.num_cps()];
        let k = kinematics_at(&surf, 0.37, 0.6, &zero).unwrap();
        for i in 0..3 {
            assert_relative_eq!(k.strain[i], 0.0);
            assert_relative_eq!(k.curvature_change[i], 0.0);
        }
        let n = &k.n_ref;
        assert_relative_eq!(
            (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt(),
            1.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn rigid_translation_is_strain_free() {
        let surf = quarter_cylinder(1.5, 2.0);
        let shift = vec![[0.3, -0.2, 0.7]; surf.num_cps()];
        let k = kinematics_at(&surf, 0.21, 0.83, &shift).unwrap();
        for i in 0..3 {
            assert_relative_eq!(k.strain[i], 0.0, epsilon = 1e-12);
            assert_relative_eq!(k.curvature_change[i], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn cylinder_curvature_matches_radius() {
        // Normal curvature along the circumferential direction is 1/R.
        let r = 2.5;
        let surf = quarter_cylinder(r, 4.0);
        let zero = vec![[0.0; 3]; surf.num_cps()];
        let k = kinematics_at(&surf, 0.4, 0.5, &zero).unwrap();
        let kappa = k.curv_ref[0] / k.metric_ref[0];
        assert_relative_eq!(kappa.abs(), 1.0 / r, max_relative = 1e-12);
        // Straight direction has zero curvature.
        assert_relative_eq!(k.curv_ref[1], 0.0, epsilon = 1e-12);
    }
}
