//! Simply supported square plate under uniform load: the discrete
//! Kirchhoff–Love solution must reproduce the Navier series deflection.

use shellopt::shell::{ClampOrder, LoadCase, Material, PatchEdge, ShellPatch};
use shellopt::solver::SparseLu;
use shellopt::splines::{KnotVector, NurbsSurface};

/// Navier series coefficient for the center deflection of a simply
/// supported square plate: w_c = α q L⁴ / D.
fn navier_alpha() -> f64 {
    let mut sum = 0.0;
    for m in (1..200).step_by(2) {
        for n in (1..200).step_by(2) {
            let sm = if m % 4 == 1 { 1.0 } else { -1.0 };
            let sn = if n % 4 == 1 { 1.0 } else { -1.0 };
            let (mf, nf) = (m as f64, n as f64);
            sum += sm * sn / (mf * nf * (mf * mf + nf * nf).powi(2));
        }
    }
    16.0 / std::f64::consts::PI.powi(6) * sum
}

#[test]
fn navier_plate_center_deflection() {
    let alpha = navier_alpha();
    // Frozen independent value of the series; the discretization must land
    // within 1% of it.
    assert!((alpha - 0.0040623527).abs() < 1e-9);

    let l = 1.0;
    let t = 0.01;
    let e = 2.0e11;
    let nu = 0.3;
    let q = 1.0e3;

    let k = KnotVector::uniform(3, 16).unwrap();
    let g = k.greville();
    let mut cps = Vec::new();
    for &u in &g {
        for &v in &g {
            cps.push([u * l, v * l, 0.0]);
        }
    }
    let n = g.len() * g.len();
    let surface = NurbsSurface::new(k.clone(), k, cps, vec![1.0; n]).unwrap();
    let mut patch = ShellPatch::new(surface, t, Material::new(e, nu).unwrap()).unwrap();
    patch
        .add_load(LoadCase::Dead {
            force_per_area: [0.0, 0.0, -q],
        })
        .unwrap();
    for edge in [
        PatchEdge::UMin,
        PatchEdge::UMax,
        PatchEdge::VMin,
        PatchEdge::VMax,
    ] {
        patch.fix_edge(edge, &[0, 1, 2], ClampOrder::Pinned);
    }

    // Linear solve: K(0) d = -R(0).
    let d0 = vec![0.0; patch.ndof()];
    let (r, k_mat) = patch.residual_and_stiffness(&d0).unwrap();
    let rhs: Vec<f64> = r.iter().map(|x| -x).collect();
    let d = SparseLu::factor(&k_mat).unwrap().solve(&rhs);

    // Deflection at the plate center.
    let (idx, tables) = patch.surface().rational_basis_derivs(0.5, 0.5);
    let mut w_c = 0.0;
    for (k_loc, &gi) in idx.iter().enumerate() {
        w_c += tables[0][k_loc] * d[3 * gi + 2];
    }

    let d_bend = e * t * t * t / (12.0 * (1.0 - nu * nu));
    let exact = -alpha * q * l.powi(4) / d_bend;
    let rel = (w_c - exact).abs() / exact.abs();
    assert!(
        rel < 0.01,
        "center deflection {w_c:.6e} vs Navier {exact:.6e} (rel err {rel:.3e})"
    );
}
