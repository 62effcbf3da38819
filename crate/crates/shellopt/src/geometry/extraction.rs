//! Lagrange extraction: an interpolatory nodal space laid over each patch,
//! the sparse evaluation matrix mapping spline control points to nodal
//! values, and the least-squares inverse fit.

use crate::solver::{CscMatrix, SparseLu, Triplets};
use crate::splines::{KnotVector, NurbsSurface};
use crate::{Error, Result};

/// Tensor-product Lagrange node layout over a patch's parametric domain.
///
/// Nodes are equispaced within each element at the patch's polynomial
/// degree; nodes shared between adjacent elements appear once. The
/// flattened ordering is lexicographic with the u index outermost,
/// matching the control-point ordering.
#[derive(Debug, Clone)]
pub struct LagrangeNodes {
    us: Vec<f64>,
    vs: Vec<f64>,
}

impl LagrangeNodes {
    pub fn num_u(&self) -> usize {
        self.us.len()
    }

    pub fn num_v(&self) -> usize {
        self.vs.len()
    }

    pub fn len(&self) -> usize {
        self.us.len() * self.vs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parametric coordinates of node `i` (u-outer flattening).
    pub fn param(&self, i: usize) -> (f64, f64) {
        (self.us[i / self.vs.len()], self.vs[i % self.vs.len()])
    }

    pub fn params(&self) -> Vec<(f64, f64)> {
        (0..self.len()).map(|i| self.param(i)).collect()
    }

    /// Quad connectivity between adjacent grid nodes, counter-clockwise.
    pub fn quads(&self) -> Vec<[usize; 4]> {
        let (nu, nv) = (self.us.len(), self.vs.len());
        let mut cells = Vec::with_capacity((nu - 1) * (nv - 1));
        for i in 0..nu - 1 {
            for j in 0..nv - 1 {
                let n00 = i * nv + j;
                cells.push([n00, n00 + nv, n00 + nv + 1, n00 + 1]);
            }
        }
        cells
    }
}

fn nodes_1d(kv: &KnotVector) -> Vec<f64> {
    let p = kv.degree();
    let mut out = Vec::new();
    for (_, ua, ub) in kv.elements() {
        let start = if out.is_empty() { 0 } else { 1 };
        for i in start..=p {
            out.push(ua + (ub - ua) * i as f64 / p as f64);
        }
    }
    out
}

/// Interpolatory node layout for `surface`: per-element equispaced nodes of
/// the surface degree in each direction, shared element-boundary nodes
/// merged.
pub fn lagrange_nodes(surface: &NurbsSurface) -> LagrangeNodes {
    LagrangeNodes {
        us: nodes_1d(surface.knots_u()),
        vs: nodes_1d(surface.knots_v()),
    }
}

/// Sparse evaluation matrix `M` with `M[i][j] = R_j(xi_i)`: applied to the
/// control net it produces the physical positions of the Lagrange nodes.
#[derive(Debug, Clone)]
pub struct ExtractionMatrix {
    matrix: CscMatrix,
}

impl ExtractionMatrix {
    pub fn matrix(&self) -> &CscMatrix {
        &self.matrix
    }

    pub fn num_nodes(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn num_cps(&self) -> usize {
        self.matrix.ncols()
    }

    /// Nodal positions `M . P` for a control net given per coordinate.
    pub fn apply(&self, cps: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let n = self.matrix.nrows();
        let mut out = vec![[0.0; 3]; n];
        for k in 0..3 {
            let xk: Vec<f64> = cps.iter().map(|p| p[k]).collect();
            for (o, v) in out.iter_mut().zip(self.matrix.matvec(&xk)) {
                o[k] = v;
            }
        }
        out
    }
}

/// Evaluate the rational basis of `surface` at every node.
pub fn build_extraction(surface: &NurbsSurface, nodes: &LagrangeNodes) -> ExtractionMatrix {
    let mut t = Triplets::new(nodes.len(), surface.num_cps());
    for i in 0..nodes.len() {
        let (u, v) = nodes.param(i);
        let (support, tables) = surface.rational_basis_derivs(u, v);
        for (&j, &r) in support.iter().zip(&tables[0]) {
            t.push(i, j, r);
        }
    }
    ExtractionMatrix {
        matrix: t.into_csc(),
    }
}

/// Least-squares fit of control points to nodal positions, solving the
/// normal equations `(M^T M) P = M^T P_L` per coordinate.
pub fn fit_control_points(m: &ExtractionMatrix, nodal: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    if nodal.len() != m.num_nodes() {
        return Err(Error::DimensionMismatch(format!(
            "{} nodal positions for an extraction with {} nodes",
            nodal.len(),
            m.num_nodes()
        )));
    }
    let gram = m.matrix.ata();
    let factor = SparseLu::factor(&gram)?;
    let n = m.num_cps();
    let mut out = vec![[0.0; 3]; n];
    for k in 0..3 {
        let pk: Vec<f64> = nodal.iter().map(|p| p[k]).collect();
        let rhs = m.matrix.matvec_transpose(&pk);
        let sol = factor.solve(&rhs);
        for (o, v) in out.iter_mut().zip(sol) {
            o[k] = v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splines::{elevate_degree, KnotVector};
    use approx::assert_relative_eq;

    fn biquadratic(nel_u: usize, nel_v: usize) -> NurbsSurface {
        let base = NurbsSurface::bilinear(
            [0.0, 0.0, 0.0],
            [2.0, 0.0, 0.3],
            [0.0, 1.0, -0.2],
            [2.0, 1.0, 0.5],
        );
        let s = elevate_degree(&base, 1, 1).unwrap().surface;
        let add = |n: usize| -> Vec<f64> { (1..n).map(|i| i as f64 / n as f64).collect() };
        crate::splines::refine_knots(&s, &add(nel_u), &add(nel_v)).unwrap().surface
    }

    #[test]
    fn bilinear_single_element_gives_corners() {
        let s = NurbsSurface::bilinear(
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
        );
        let nodes = lagrange_nodes(&s);
        assert_eq!(nodes.len(), 4);
        assert_eq!(
            nodes.params(),
            vec![(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)]
        );
        assert_eq!(nodes.quads(), vec![[0, 2, 3, 1]]);
    }

    #[test]
    fn biquadratic_single_element_grid() {
        let s = biquadratic(1, 1);
        let nodes = lagrange_nodes(&s);
        assert_eq!((nodes.num_u(), nodes.num_v()), (3, 3));
        for i in 0..9 {
            let (u, v) = nodes.param(i);
            let expect = |k: usize| [0.0, 0.5, 1.0][k];
            assert_relative_eq!(u, expect(i / 3));
            assert_relative_eq!(v, expect(i % 3));
        }
    }

    #[test]
    fn two_by_one_elements_merge_shared_column() {
        // Inclusion-exclusion: 2 elements x 3 nodes - 1 shared column = 5
        // unique u nodes; 3 v nodes.
        let s = biquadratic(2, 1);
        let nodes = lagrange_nodes(&s);
        assert_eq!((nodes.num_u(), nodes.num_v()), (5, 3));
        assert_eq!(nodes.len(), 15);
        let us: Vec<f64> = (0..5).map(|i| nodes.param(i * 3).0).collect();
        for (a, b) in us.iter().zip([0.0, 0.25, 0.5, 0.75, 1.0]) {
            assert_relative_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn extraction_reproduces_surface_at_nodes() {
        let s = {
            // Rational patch with non-uniform weights to exercise the
            // rational basis path.
            let ku = KnotVector::new(2, vec![0.0, 0.0, 0.0, 0.5, 1.0, 1.0, 1.0]).unwrap();
            let kv = KnotVector::new(1, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
            let mut cps = Vec::new();
            let mut ws = Vec::new();
            for i in 0..4 {
                for j in 0..2 {
                    cps.push([i as f64, j as f64, (i * j) as f64 * 0.3]);
                    ws.push(1.0 + 0.2 * (i + j) as f64);
                }
            }
            NurbsSurface::new(ku, kv, cps, ws).unwrap()
        };
        let nodes = lagrange_nodes(&s);
        let m = build_extraction(&s, &nodes);
        assert_eq!(m.num_nodes(), nodes.len());
        assert_eq!(m.num_cps(), s.num_cps());
        let nodal = m.apply(s.control_points());
        for i in 0..nodes.len() {
            let (u, v) = nodes.param(i);
            let x = s.eval(u, v);
            for k in 0..3 {
                assert_relative_eq!(nodal[i][k], x[k], epsilon = 1e-12);
            }
        }
        // Partition of unity: every row sums to one.
        let ones = vec![1.0; m.num_cps()];
        for r in m.matrix().matvec(&ones) {
            assert_relative_eq!(r, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn fit_round_trips_consistent_data() {
        let s = biquadratic(3, 2);
        let nodes = lagrange_nodes(&s);
        let m = build_extraction(&s, &nodes);
        let nodal = m.apply(s.control_points());
        let fitted = fit_control_points(&m, &nodal).unwrap();
        for (a, b) in fitted.iter().zip(s.control_points()) {
            for k in 0..3 {
                assert_relative_eq!(a[k], b[k], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn fit_ignores_null_space_of_m_transpose() {
        let s = biquadratic(3, 2);
        let nodes = lagrange_nodes(&s);
        let m = build_extraction(&s, &nodes);
        let nodal = m.apply(s.control_points());
        let base = fit_control_points(&m, &nodal).unwrap();

        // Project a pseudo-random vector onto the orthogonal complement of
        // range(M): e = r - M (M^T M)^{-1} M^T r, so M^T e = 0.
        let nn = m.num_nodes();
        let r: Vec<f64> = (0..nn).map(|i| ((i * 2654435761) % 1000) as f64 / 500.0 - 1.0).collect();
        let gram = m.matrix().ata();
        let lu = SparseLu::factor(&gram).unwrap();
        let coeffs = lu.solve(&m.matrix().matvec_transpose(&r));
        let proj = m.matrix().matvec(&coeffs);
        let e: Vec<f64> = r.iter().zip(&proj).map(|(a, b)| a - b).collect();
        let check = m.matrix().matvec_transpose(&e);
        assert!(check.iter().all(|v| v.abs() < 1e-10));

        let perturbed: Vec<[f64; 3]> = nodal
            .iter()
            .zip(&e)
            .map(|(p, ei)| [p[0] + ei, p[1] - 2.0 * ei, p[2] + 0.5 * ei])
            .collect();
        let refit = fit_control_points(&m, &perturbed).unwrap();
        for (a, b) in refit.iter().zip(&base) {
            for k in 0..3 {
                assert_relative_eq!(a[k], b[k], epsilon = 1e-9, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn fit_rejects_wrong_length() {
        let s = biquadratic(1, 1);
        let nodes = lagrange_nodes(&s);
        let m = build_extraction(&s, &nodes);
        assert!(fit_control_points(&m, &[[0.0; 3]; 2]).is_err());
    }
}
