use super::KnotVector;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Point and parametric derivatives of a surface up to second order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceJet {
    pub x: [f64; 3],
    pub du: [f64; 3],
    pub dv: [f64; 3],
    pub duu: [f64; 3],
    pub duv: [f64; 3],
    pub dvv: [f64; 3],
}

/// Tensor-product NURBS surface.
///
/// Control points and weights are stored row-major with the `u` index
/// outermost: entry `(i, j)` lives at `i * nv + j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NurbsSurface {
    ku: KnotVector,
    kv: KnotVector,
    cps: Vec<[f64; 3]>,
    weights: Vec<f64>,
}

impl NurbsSurface {
    pub fn new(
        ku: KnotVector,
        kv: KnotVector,
        cps: Vec<[f64; 3]>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let n = ku.num_basis() * kv.num_basis();
        if cps.len() != n {
            return Err(Error::InvalidGeometry(format!(
                "expected {} control points ({} x {}), got {}",
                n,
                ku.num_basis(),
                kv.num_basis(),
                cps.len()
            )));
        }
        if weights.len() != n {
            return Err(Error::InvalidGeometry(format!(
                "expected {} weights, got {}",
                n,
                weights.len()
            )));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidGeometry(
                "weights must be finite and positive".into(),
            ));
        }
        if cps.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::InvalidGeometry(
                "control points must be finite".into(),
            ));
        }
        Ok(NurbsSurface {
            ku,
            kv,
            cps,
            weights,
        })
    }

    /// Flat bilinear patch through four corners (degree 1 x 1, unit
    /// weights): corners ordered `(u=0,v=0), (u=1,v=0), (u=0,v=1), (u=1,v=1)`.
    pub fn bilinear(p00: [f64; 3], p10: [f64; 3], p01: [f64; 3], p11: [f64; 3]) -> Self {
        let k = KnotVector::new(1, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        NurbsSurface::new(
            k.clone(),
            k,
            vec![p00, p01, p10, p11],
            vec![1.0; 4],
        )
        .unwrap()
    }

    pub fn knots_u(&self) -> &KnotVector {
        &self.ku
    }

    pub fn knots_v(&self) -> &KnotVector {
        &self.kv
    }

    pub fn num_u(&self) -> usize {
        self.ku.num_basis()
    }

    pub fn num_v(&self) -> usize {
        self.kv.num_basis()
    }

    pub fn num_cps(&self) -> usize {
        self.cps.len()
    }

    pub fn degrees(&self) -> (usize, usize) {
        (self.ku.degree(), self.kv.degree())
    }

    #[inline]
    pub fn cp_index(&self, i: usize, j: usize) -> usize {
        i * self.num_v() + j
    }

    pub fn control_points(&self) -> &[[f64; 3]] {
        &self.cps
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Same parameterization with replaced control points.
    pub fn with_control_points(&self, cps: Vec<[f64; 3]>) -> Result<Self> {
        NurbsSurface::new(self.ku.clone(), self.kv.clone(), cps, self.weights.clone())
    }

    pub fn eval(&self, u: f64, v: f64) -> [f64; 3] {
        self.jet2(u, v).x
    }

    /// Point and all parametric derivatives up to second order via the
    /// rational quotient rule applied to homogeneous derivatives.
    pub fn jet2(&self, u: f64, v: f64) -> SurfaceJet {
        let (su, du) = self.ku.basis_derivs(u, 2);
        let (sv, dv) = self.kv.basis_derivs(v, 2);
        let (p, q) = (self.ku.degree(), self.kv.degree());
        let nv = self.num_v();

        // Homogeneous derivatives A[k][l] (numerator) and w[k][l].
        let mut a = [[[0.0f64; 3]; 3]; 3];
        let mut w = [[0.0f64; 3]; 3];
        for ii in 0..=p {
            let gi = su - p + ii;
            for jj in 0..=q {
                let gj = sv - q + jj;
                let idx = gi * nv + gj;
                let wt = self.weights[idx];
                let cp = self.cps[idx];
                for k in 0..=2usize {
                    for l in 0..=2 - k {
                        let b = du[k][ii] * dv[l][jj] * wt;
                        w[k][l] += b;
                        for d in 0..3 {
                            a[k][l][d] += b * cp[d];
                        }
                    }
                }
            }
        }

        let inv = 1.0 / w[0][0];
        let mut s = [[[0.0f64; 3]; 3]; 3];
        for d in 0..3 {
            s[0][0][d] = a[0][0][d] * inv;
            s[1][0][d] = (a[1][0][d] - w[1][0] * s[0][0][d]) * inv;
            s[0][1][d] = (a[0][1][d] - w[0][1] * s[0][0][d]) * inv;
            s[2][0][d] = (a[2][0][d] - 2.0 * w[1][0] * s[1][0][d] - w[2][0] * s[0][0][d]) * inv;
            s[0][2][d] = (a[0][2][d] - 2.0 * w[0][1] * s[0][1][d] - w[0][2] * s[0][0][d]) * inv;
            s[1][1][d] = (a[1][1][d]
                - w[1][0] * s[0][1][d]
                - w[0][1] * s[1][0][d]
                - w[1][1] * s[0][0][d])
                * inv;
        }
        SurfaceJet {
            x: s[0][0],
            du: s[1][0],
            dv: s[0][1],
            duu: s[2][0],
            duv: s[1][1],
            dvv: s[0][2],
        }
    }

    /// Unit normal `(S_u x S_v) / |S_u x S_v|`.
    pub fn unit_normal(&self, u: f64, v: f64) -> [f64; 3] {
        let j = self.jet2(u, v);
        let n = [
            j.du[1] * j.dv[2] - j.du[2] * j.dv[1],
            j.du[2] * j.dv[0] - j.du[0] * j.dv[2],
            j.du[0] * j.dv[1] - j.du[1] * j.dv[0],
        ];
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        [n[0] / len, n[1] / len, n[2] / len]
    }

    /// Rational basis functions and their parametric derivatives up to
    /// second order at `(u, v)`.
    ///
    /// Returns the global control-point indices of the support and six
    /// parallel tables: values, `d/du`, `d/dv`, `d2/duu`, `d2/dudv`,
    /// `d2/dvv`.
    pub fn rational_basis_derivs(&self, u: f64, v: f64) -> (Vec<usize>, [Vec<f64>; 6]) {
        let (su, du) = self.ku.basis_derivs(u, 2);
        let (sv, dv) = self.kv.basis_derivs(v, 2);
        let (p, q) = (self.ku.degree(), self.kv.degree());
        let nv = self.num_v();
        let nen = (p + 1) * (q + 1);

        let mut idx = Vec::with_capacity(nen);
        // Weighted bivariate B-spline values/derivatives per support function.
        let mut b = [[0.0f64; 3]; 3];
        let mut bw: Vec<[[f64; 3]; 3]> = Vec::with_capacity(nen);
        let mut w = [[0.0f64; 3]; 3];
        for ii in 0..=p {
            let gi = su - p + ii;
            for jj in 0..=q {
                let gj = sv - q + jj;
                let gidx = gi * nv + gj;
                idx.push(gidx);
                let wt = self.weights[gidx];
                for k in 0..=2usize {
                    for l in 0..=2 - k {
                        b[k][l] = du[k][ii] * dv[l][jj] * wt;
                        w[k][l] += b[k][l];
                    }
                }
                bw.push(b);
            }
        }

        let inv = 1.0 / w[0][0];
        let mut out: [Vec<f64>; 6] = Default::default();
        for t in out.iter_mut() {
            t.reserve(nen);
        }
        for bk in &bw {
            let r = bk[0][0] * inv;
            let ru = (bk[1][0] - w[1][0] * r) * inv;
            let rv = (bk[0][1] - w[0][1] * r) * inv;
            let ruu = (bk[2][0] - 2.0 * w[1][0] * ru - w[2][0] * r) * inv;
            let ruv = (bk[1][1] - w[1][0] * rv - w[0][1] * ru - w[1][1] * r) * inv;
            let rvv = (bk[0][2] - 2.0 * w[0][1] * rv - w[0][2] * r) * inv;
            out[0].push(r);
            out[1].push(ru);
            out[2].push(rv);
            out[3].push(ruu);
            out[4].push(ruv);
            out[5].push(rvv);
        }
        (idx, out)
    }

    /// Greville parameter grid, `(u_i, v_j)` flattened row-major u-outer.
    pub fn greville_grid(&self) -> Vec<(f64, f64)> {
        let gu = self.ku.greville();
        let gv = self.kv.greville();
        let mut out = Vec::with_capacity(gu.len() * gv.len());
        for &u in &gu {
            for &v in &gv {
                out.push((u, v));
            }
        }
        out
    }

    /// Closest-point projection of `x` onto the surface by damped Newton on
    /// the stationarity of `|S(u,v) - x|^2`, clamped to the domain.
    pub fn invert_point(
        &self,
        x: [f64; 3],
        guess: (f64, f64),
        tol: f64,
        max_iter: usize,
    ) -> Result<(f64, f64)> {
        let (ua, ub) = self.ku.domain();
        let (va, vb) = self.kv.domain();
        let clamp = |u: f64, v: f64| (u.clamp(ua, ub), v.clamp(va, vb));
        let (mut u, mut v) = clamp(guess.0, guess.1);

        let dot = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        for _ in 0..max_iter {
            let j = self.jet2(u, v);
            let r = [j.x[0] - x[0], j.x[1] - x[1], j.x[2] - x[2]];
            let f = [dot(&r, &j.du), dot(&r, &j.dv)];
            let scale = (dot(&j.du, &j.du) * dot(&j.dv, &j.dv)).sqrt().max(1e-30);
            if (f[0] * f[0] + f[1] * f[1]).sqrt() <= tol * scale {
                return Ok((u, v));
            }
            let j00 = dot(&j.du, &j.du) + dot(&r, &j.duu);
            let j01 = dot(&j.du, &j.dv) + dot(&r, &j.duv);
            let j11 = dot(&j.dv, &j.dv) + dot(&r, &j.dvv);
            let det = j00 * j11 - j01 * j01;
            let (du_step, dv_step) = if det.abs() > 1e-30 {
                (
                    -(j11 * f[0] - j01 * f[1]) / det,
                    -(j00 * f[1] - j01 * f[0]) / det,
                )
            } else {
                // Fall back to gradient descent on the distance.
                (-f[0] / scale, -f[1] / scale)
            };
            let (nu, nv) = clamp(u + du_step, v + dv_step);
            if (nu - u).abs() <= 1e-15 * (ub - ua) && (nv - v).abs() <= 1e-15 * (vb - va) {
                return Ok((nu, nv));
            }
            u = nu;
            v = nv;
        }
        Err(Error::InversionFailed(format!(
            "no convergence near (u, v) = ({u:.6}, {v:.6})"
        )))
    }
}
