use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Open (clamped) knot vector of a univariate B-spline basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotVector {
    degree: usize,
    knots: Vec<f64>,
}

impl KnotVector {
    /// Validates openness, ordering and multiplicities.
    pub fn new(degree: usize, knots: Vec<f64>) -> Result<Self> {
        if degree == 0 {
            return Err(Error::InvalidKnots("degree must be at least 1".into()));
        }
        let p = degree;
        if knots.len() < 2 * (p + 1) {
            return Err(Error::InvalidKnots(format!(
                "need at least {} knots for degree {}, got {}",
                2 * (p + 1),
                p,
                knots.len()
            )));
        }
        if knots.iter().any(|k| !k.is_finite()) {
            return Err(Error::InvalidKnots("knots must be finite".into()));
        }
        if knots.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidKnots("knots must be non-decreasing".into()));
        }
        let m = knots.len() - 1;
        if knots[p] != knots[0] || knots[m - p] != knots[m] {
            return Err(Error::InvalidKnots(
                "knot vector must be open: end knots repeated degree + 1 times".into(),
            ));
        }
        if knots[p] == knots[m - p] {
            return Err(Error::InvalidKnots("parametric domain is empty".into()));
        }
        // Interior multiplicity above the degree makes basis functions
        // discontinuous.
        let mut i = p + 1;
        while i < m - p {
            let mut mult = 1;
            while i + mult <= m - p && knots[i + mult] == knots[i] {
                mult += 1;
            }
            if mult > p {
                return Err(Error::InvalidKnots(format!(
                    "interior knot {} has multiplicity {} > degree {}",
                    knots[i], mult, p
                )));
            }
            i += mult;
        }
        Ok(KnotVector { degree, knots })
    }

    /// Uniform open knot vector on `[0, 1]` with `num_elements` spans.
    pub fn uniform(degree: usize, num_elements: usize) -> Result<Self> {
        if num_elements == 0 {
            return Err(Error::InvalidKnots("need at least one element".into()));
        }
        let mut knots = vec![0.0; degree];
        for i in 0..=num_elements {
            knots.push(i as f64 / num_elements as f64);
        }
        knots.extend(std::iter::repeat(1.0).take(degree));
        KnotVector::new(degree, knots)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions (control points) of the space.
    pub fn num_basis(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    /// Parametric domain `[a, b]`.
    pub fn domain(&self) -> (f64, f64) {
        let m = self.knots.len() - 1;
        (self.knots[self.degree], self.knots[m - self.degree])
    }

    /// Knot span index `i` with `knots[i] <= u < knots[i + 1]`; the right
    /// end of the domain maps to the last non-empty span.
    pub fn find_span(&self, u: f64) -> usize {
        let p = self.degree;
        let n = self.num_basis() - 1;
        if u >= self.knots[n + 1] {
            // Clamp to the last non-empty span.
            let mut i = n;
            while self.knots[i] == self.knots[i + 1] {
                i -= 1;
            }
            return i;
        }
        if u <= self.knots[p] {
            return p;
        }
        let (mut low, mut high) = (p, n + 1);
        let mut mid = (low + high) / 2;
        while u < self.knots[mid] || u >= self.knots[mid + 1] {
            if u < self.knots[mid] {
                high = mid;
            } else {
                low = mid;
            }
            mid = (low + high) / 2;
        }
        mid
    }

    /// Non-empty spans as `(span_index, u_start, u_end)`.
    pub fn elements(&self) -> Vec<(usize, f64, f64)> {
        let p = self.degree;
        let n = self.num_basis();
        (p..n)
            .filter(|&i| self.knots[i] < self.knots[i + 1])
            .map(|i| (i, self.knots[i], self.knots[i + 1]))
            .collect()
    }

    /// The `degree + 1` basis functions that are non-zero on span `span`
    /// are `span - degree ..= span`.
    pub fn first_basis(&self, span: usize) -> usize {
        span - self.degree
    }

    /// Values and derivatives of the non-zero basis functions at `u`.
    ///
    /// Returns `(span, ders)` where `ders[k][j]` is the `k`-th derivative of
    /// basis function `span - degree + j`. Orders above the degree are zero.
    pub fn basis_derivs(&self, u: f64, nderiv: usize) -> (usize, Vec<Vec<f64>>) {
        let p = self.degree;
        let span = self.find_span(u);
        let uk = &self.knots;
        let nd = nderiv.min(p);

        // Banded triangular table of basis values and knot differences.
        let mut ndu = vec![vec![0.0; p + 1]; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = u - uk[span + 1 - j];
            right[j] = uk[span + j] - u;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }

        let mut ders = vec![vec![0.0; p + 1]; nderiv + 1];
        for j in 0..=p {
            ders[0][j] = ndu[j][p];
        }

        let mut a = vec![vec![0.0; p + 1]; 2];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0][0] = 1.0;
            for k in 1..=nd {
                let mut d = 0.0;
                let rk = r as isize - k as isize;
                let pk = p - k;
                if r >= k {
                    a[s2][0] = a[s1][0] / ndu[pk + 1][rk as usize];
                    d = a[s2][0] * ndu[rk as usize][pk];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if r as isize - 1 <= pk as isize {
                    k - 1
                } else {
                    p - r
                };
                for j in j1..=j2 {
                    a[s2][j] =
                        (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][(rk + j as isize) as usize];
                    d += a[s2][j] * ndu[(rk + j as isize) as usize][pk];
                }
                if r <= pk {
                    a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                    d += a[s2][k] * ndu[r][pk];
                }
                ders[k][r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }

        let mut r = p as f64;
        for k in 1..=nd {
            for j in 0..=p {
                ders[k][j] *= r;
            }
            r *= (p - k) as f64;
        }
        (span, ders)
    }

    /// Basis values only.
    pub fn basis_values(&self, u: f64) -> (usize, Vec<f64>) {
        let (span, mut d) = self.basis_derivs(u, 0);
        (span, d.swap_remove(0))
    }

    /// Greville abscissae: the `i`-th is the mean of `degree` consecutive
    /// interior knots starting at `i + 1`.
    pub fn greville(&self) -> Vec<f64> {
        let p = self.degree;
        (0..self.num_basis())
            .map(|i| self.knots[i + 1..=i + p].iter().sum::<f64>() / p as f64)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn rejects_malformed_vectors() {
        assert!(KnotVector::new(2, vec![0.0, 0.0, 0.0, 1.0, 1.0]).is_err());
        assert!(KnotVector::new(2, vec![0.0, 0.0, 0.5, 1.0, 1.0, 1.0]).is_err());
        assert!(KnotVector::new(1, vec![0.0, 0.0, 0.6, 0.4, 1.0, 1.0]).is_err());
        // Excess end multiplicity gives a basis function with empty support.
        assert!(KnotVector::new(1, vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0]).is_err());
        assert!(KnotVector::new(1, vec![0.0, 0.0, 0.5, 1.0, 1.0]).is_ok());
        assert!(KnotVector::new(2, vec![0.0; 6]).is_err());
        // interior multiplicity above degree
        assert!(KnotVector::new(
            1,
            vec![0.0, 0.0, 0.5, 0.5, 1.0, 1.0]
        )
        .is_err());
    }

    #[test]
    fn span_lookup_matches_hand_results() {
        let k = KnotVector::new(2, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(k.find_span(0.5), 2);
        assert_eq!(k.find_span(0.0), 2);
        assert_eq!(k.find_span(1.0), 2);

        let k = KnotVector::new(1, vec![0.0, 0.0, 0.5, 1.0, 1.0]).unwrap();
        assert_eq!(k.find_span(0.25), 1);
        assert_eq!(k.find_span(0.5), 2);
        assert_eq!(k.find_span(1.0), 2);

        let k = KnotVector::uniform(3, 4).unwrap();
        assert_eq!(k.find_span(0.3), 4);
    }

    #[test]
    fn bernstein_values_at_midpoint() {
        let k = KnotVector::new(2, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let (span, vals) = k.basis_values(0.5);
        assert_eq!(span, 2);
        assert_relative_eq!(vals[0], 0.25);
        assert_relative_eq!(vals[1], 0.5);
        assert_relative_eq!(vals[2], 0.25);
    }

    #[test]
    fn derivatives_match_central_differences() {
        let k = KnotVector::uniform(3, 5).unwrap();
        let h = 1e-6;
        for &u in &[0.13, 0.37, 0.55, 0.82] {
            let (span, d) = k.basis_derivs(u, 2);
            let (sp, vp) = k.basis_values(u + h);
            let (sm, vm) = k.basis_values(u - h);
            assert_eq!(sp, span);
            assert_eq!(sm, span);
            for j in 0..=3 {
                let fd1 = (vp[j] - vm[j]) / (2.0 * h);
                let fd2 = (vp[j] - 2.0 * d[0][j] + vm[j]) / (h * h);
                assert_relative_eq!(d[1][j], fd1, epsilon = 1e-5, max_relative = 1e-5);
                assert_relative_eq!(d[2][j], fd2, epsilon = 2e-2, max_relative = 2e-2);
            }
        }
    }

    #[test]
    fn greville_of_quadratic_bezier() {
        let k = KnotVector::new(2, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(k.greville(), vec![0.0, 0.5, 1.0]);
        let k = KnotVector::uniform(2, 2).unwrap();
        assert_eq!(k.greville(), vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn derivative_orders_above_degree_are_zero() {
        let k = KnotVector::new(2, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let (_, d) = k.basis_derivs(0.3, 3);
        assert!(d[3].iter().all(|&x| x == 0.0));
    }

    prop_compose! {
        fn arb_knot_vector()(degree in 1usize..=4, nel in 1usize..=6, seed in 0u64..1000)
            -> KnotVector
        {
            // Random strictly-increasing interior breakpoints.
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut brk: Vec<f64> = (0..nel - 1).map(|_| rng.gen_range(0.05..0.95)).collect();
            brk.sort_by(|a, b| a.partial_cmp(b).unwrap());
            brk.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
            let mut knots = vec![0.0; degree + 1];
            knots.extend(brk);
            knots.extend(std::iter::repeat(1.0).take(degree + 1));
            KnotVector::new(degree, knots).unwrap()
        }
    }

    proptest! {
        #[test]
        fn partition_of_unity(k in arb_knot_vector(), t in 0.0f64..=1.0) {
            let (_, vals) = k.basis_values(t);
            let s: f64 = vals.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12, "sum = {s}");
            prop_assert!(vals.iter().all(|&v| v >= -1e-14));
        }

        #[test]
        fn derivative_rows_sum_to_zero(k in arb_knot_vector(), t in 0.0f64..=1.0) {
            let (_, d) = k.basis_derivs(t, 2);
            let s1: f64 = d[1].iter().sum();
            let s2: f64 = d[2].iter().sum();
            prop_assert!(s1.abs() <= 1e-9 * (1.0 + d[1].iter().map(|x| x.abs()).sum::<f64>()));
            prop_assert!(s2.abs() <= 1e-9 * (1.0 + d[2].iter().map(|x| x.abs()).sum::<f64>()));
        }

        #[test]
        fn greville_is_sorted_and_in_domain(k in arb_knot_vector()) {
            let g = k.greville();
            prop_assert_eq!(g.len(), k.num_basis());
            let (a, b) = k.domain();
            prop_assert!(g.windows(2).all(|w| w[0] <= w[1] + 1e-15));
            prop_assert!(g.iter().all(|&x| x >= a - 1e-15 && x <= b + 1e-15));
        }
    }
}
