use super::KnotVector;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Trivariate tensor-product B-spline block (unit weights), used as the
/// free-form deformation volume.
///
/// Control points are stored with `u` outermost and `w` innermost:
/// entry `(i, j, k)` lives at `(i * nv + j) * nw + k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BsplineVolume {
    ku: KnotVector,
    kv: KnotVector,
    kw: KnotVector,
    cps: Vec<[f64; 3]>,
}

impl BsplineVolume {
    pub fn new(
        ku: KnotVector,
        kv: KnotVector,
        kw: KnotVector,
        cps: Vec<[f64; 3]>,
    ) -> Result<Self> {
        let n = ku.num_basis() * kv.num_basis() * kw.num_basis();
        if cps.len() != n {
            return Err(Error::InvalidGeometry(format!(
                "expected {} control points ({} x {} x {}), got {}",
                n,
                ku.num_basis(),
                kv.num_basis(),
                kw.num_basis(),
                cps.len()
            )));
        }
        Ok(BsplineVolume { ku, kv, kw, cps })
    }

    pub fn knots(&self) -> (&KnotVector, &KnotVector, &KnotVector) {
        (&self.ku, &self.kv, &self.kw)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (
            self.ku.num_basis(),
            self.kv.num_basis(),
            self.kw.num_basis(),
        )
    }

    #[inline]
    pub fn cp_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.kv.num_basis() + j) * self.kw.num_basis() + k
    }

    pub fn num_cps(&self) -> usize {
        self.cps.len()
    }

    pub fn control_points(&self) -> &[[f64; 3]] {
        &self.cps
    }

    pub fn with_control_points(&self, cps: Vec<[f64; 3]>) -> Result<Self> {
        BsplineVolume::new(self.ku.clone(), self.kv.clone(), self.kw.clone(), cps)
    }

    pub fn eval(&self, u: f64, v: f64, w: f64) -> [f64; 3] {
        let (idx, vals) = self.basis_row(u, v, w);
        let mut x = [0.0; 3];
        for (gi, val) in idx.into_iter().zip(vals) {
            for d in 0..3 {
                x[d] += val * self.cps[gi][d];
            }
        }
        x
    }

    /// Non-zero basis values at `(u, v, w)` with their global indices.
    pub fn basis_row(&self, u: f64, v: f64, w: f64) -> (Vec<usize>, Vec<f64>) {
        let (su, nu) = self.ku.basis_values(u);
        let (sv, nv) = self.kv.basis_values(v);
        let (sw, nw) = self.kw.basis_values(w);
        let (p, q, r) = (self.ku.degree(), self.kv.degree(), self.kw.degree());
        let cap = (p + 1) * (q + 1) * (r + 1);
        let mut idx = Vec::with_capacity(cap);
        let mut vals = Vec::with_capacity(cap);
        for (ii, bu) in nu.iter().enumerate() {
            let gi = su - p + ii;
            for (jj, bv) in nv.iter().enumerate() {
                let gj = sv - q + jj;
                for (kk, bw) in nw.iter().enumerate() {
                    let gk = sw - r + kk;
                    idx.push(self.cp_index(gi, gj, gk));
                    vals.push(bu * bv * bw);
                }
            }
        }
        (idx, vals)
    }

    /// Lattice whose control points sit at the Greville abscissae of an
    /// axis-aligned box, so that the block initially maps `[domain]` to the
    /// box as the identity (in the affine sense).
    pub fn greville_box(
        ku: KnotVector,
        kv: KnotVector,
        kw: KnotVector,
        min: [f64; 3],
        max: [f64; 3],
    ) -> Result<Self> {
        let gu = ku.greville();
        let gv = kv.greville();
        let gw = kw.greville();
        let map = |g: f64, dom: (f64, f64), lo: f64, hi: f64| {
            lo + (g - dom.0) / (dom.1 - dom.0) * (hi - lo)
        };
        let (du, dv, dw) = (ku.domain(), kv.domain(), kw.domain());
        let mut cps = Vec::with_capacity(gu.len() * gv.len() * gw.len());
        for &u in &gu {
            for &v in &gv {
                for &w in &gw {
                    cps.push([
                        map(u, du, min[0], max[0]),
                        map(v, dv, min[1], max[1]),
                        map(w, dw, min[2], max[2]),
                    ]);
                }
            }
        }
        BsplineVolume::new(ku, kv, kw, cps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn greville_box_is_identity_map() {
        // Degree-2 block with several elements per direction: evaluating at
        // (u, v, w) must reproduce the affine map onto the box exactly
        // (linear precision of the Greville lattice).
        let ku = KnotVector::uniform(2, 4).unwrap();
        let kv = KnotVector::uniform(2, 1).unwrap();
        let kw = KnotVector::uniform(1, 1).unwrap();
        let min = [-1.0, 2.0, 0.5];
        let max = [3.0, 5.0, 0.75];
        let block = BsplineVolume::greville_box(ku, kv, kw, min, max).unwrap();
        for &(u, v, w) in &[(0.0, 0.0, 0.0), (0.3, 0.8, 0.5), (1.0, 1.0, 1.0), (0.77, 0.1, 0.9)] {
            let x = block.eval(u, v, w);
            assert_relative_eq!(x[0], min[0] + u * (max[0] - min[0]), epsilon = 1e-13);
            assert_relative_eq!(x[1], min[1] + v * (max[1] - min[1]), epsilon = 1e-13);
            assert_relative_eq!(x[2], min[2] + w * (max[2] - min[2]), epsilon = 1e-13);
        }
    }

    #[test]
    fn basis_row_partition_of_unity() {
        let ku = KnotVector::uniform(2, 3).unwrap();
        let kv = KnotVector::uniform(1, 2).unwrap();
        let kw = KnotVector::uniform(3, 1).unwrap();
        let block =
            BsplineVolume::greville_box(ku, kv, kw, [0.0; 3], [1.0, 1.0, 1.0]).unwrap();
        for &(u, v, w) in &[(0.15, 0.5, 0.9), (0.6, 0.33, 0.2)] {
            let (_, vals) = block.basis_row(u, v, w);
            let s: f64 = vals.iter().sum();
            assert_relative_eq!(s, 1.0, epsilon = 1e-13);
        }
    }
}
