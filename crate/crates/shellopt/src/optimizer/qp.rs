//! Dense convex quadratic programs with equalities, inequalities and an
//! SPD Hessian, solved by a dual active-set method.
//!
//! The solver starts from the unconstrained minimum and walks the dual
//! feasible path, adding the most violated constraint and dropping active
//! ones whose multiplier would turn negative.  Because every intermediate
//! point is dual feasible it needs no phase-1 and recognises an infeasible
//! constraint set as an unbounded dual step.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Solution of a convex QP in the row convention of [`solve_qp`].
#[derive(Debug, Clone)]
pub struct QpSolution {
    /// Minimiser.
    pub d: DVector<f64>,
    /// One multiplier per constraint row (zero when inactive).  At the
    /// solution `B d + g = Σ uᵢ aᵢ`; inequality multipliers are
    /// non-negative, equality multipliers carry either sign.
    pub multipliers: Vec<f64>,
    /// Indices of the rows active at the solution.
    pub active: Vec<usize>,
}

/// Minimises `½ dᵀB d + gᵀd` subject to `aᵢᵀd = bᵢ` for the first `meq`
/// rows of `(a, b)` and `aᵢᵀd ≥ bᵢ` for the rest.
///
/// `B` must be symmetric positive definite.  Returns an error when the
/// constraint rows are inconsistent (the feasible set is empty) or when the
/// active-set iteration exceeds its cycle guard.
pub fn solve_qp(
    b_mat: &DMatrix<f64>,
    g: &DVector<f64>,
    rows: &DMatrix<f64>,
    rhs: &DVector<f64>,
    meq: usize,
) -> Result<QpSolution> {
    let n = g.len();
    let m = rows.nrows();
    if b_mat.nrows() != n || b_mat.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "QP Hessian is {}x{}, expected {n}x{n}",
            b_mat.nrows(),
            b_mat.ncols()
        )));
    }
    if rows.ncols() != n && m > 0 {
        return Err(Error::DimensionMismatch(format!(
            "QP constraint rows have {} columns, expected {n}",
            rows.ncols()
        )));
    }
    if rhs.len() != m || meq > m {
        return Err(Error::DimensionMismatch(format!(
            "QP has {m} rows, rhs length {} and {meq} equalities",
            rhs.len()
        )));
    }

    let chol = b_mat
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Optimization("QP Hessian is not positive definite".into()))?;

    let mut d = -chol.solve(g);
    // Active rows: (constraint index, working sign, multiplier).  Equalities
    // are entered with whichever sign makes them look like a violated `≥`
    // row; the sign is folded back into the reported multiplier.
    let mut active: Vec<(usize, f64, f64)> = Vec::new();
    // Rows found to be linear combinations of the active set while already
    // satisfied; they stay out of the working set for good.
    let mut skipped = vec![false; m];

    let feas_tol = 1e-10 * (1.0 + rhs.amax());
    let cap = 20 * (n + m) + 50;
    let mut iters = 0usize;

    'outer: loop {
        iters += 1;
        if iters > cap {
            return Err(Error::Optimization(
                "active-set QP exceeded its iteration guard (degenerate constraints?)".into(),
            ));
        }

        // Pick the next row to enforce: equalities in order, then the most
        // violated inequality.
        let mut pick: Option<(usize, f64)> = None;
        for i in 0..meq {
            if !skipped[i] && active.iter().all(|&(j, _, _)| j != i) {
                let s = rows.row(i).dot(&d.transpose()) - rhs[i];
                let sign = if s <= 0.0 { 1.0 } else { -1.0 };
                pick = Some((i, sign));
                break;
            }
        }
        if pick.is_none() {
            let mut worst = -feas_tol;
            for i in meq..m {
                if skipped[i] || active.iter().any(|&(j, _, _)| j == i) {
                    continue;
                }
                let s = rows.row(i).dot(&d.transpose()) - rhs[i];
                if s < worst {
                    worst = s;
                    pick = Some((i, 1.0));
                }
            }
        }
        let Some((p, sign_p)) = pick else {
            break 'outer;
        };

        let a_p: DVector<f64> = rows.row(p).transpose() * sign_p;
        let b_p = rhs[p] * sign_p;
        let mut u_p = 0.0;

        loop {
            iters += 1;
            if iters > cap {
                return Err(Error::Optimization(
                    "active-set QP exceeded its iteration guard (degenerate constraints?)".into(),
                ));
            }

            // Step directions: z in the primal, r for the active multipliers.
            let binv_a = chol.solve(&a_p);
            let (z, r) = if active.is_empty() {
                (binv_a.clone(), DVector::zeros(0))
            } else {
                let mut nmat = DMatrix::zeros(n, active.len());
                for (col, &(idx, sign, _)) in active.iter().enumerate() {
                    nmat.column_mut(col)
                        .copy_from(&(rows.row(idx).transpose() * sign));
                }
                let binv_n = chol.solve(&nmat);
                let gram = nmat.transpose() * &binv_n;
                let lu = gram.lu();
                let r = lu
                    .solve(&(nmat.transpose() * &binv_a))
                    .ok_or_else(|| Error::Optimization("degenerate QP active set".into()))?;
                (&binv_a - binv_n * &r, r)
            };

            let s_p = a_p.dot(&d) - b_p;
            let za = z.dot(&a_p);
            let curvature = a_p.dot(&binv_a).abs().max(1e-300);

            // A consistent but linearly dependent row adds nothing.
            if za <= 1e-12 * curvature && s_p.abs() <= feas_tol {
                skipped[p] = true;
                continue 'outer;
            }

            // Longest dual step before an active inequality multiplier
            // crosses zero.
            let mut t1 = f64::INFINITY;
            let mut drop: Option<usize> = None;
            for (slot, &(idx, _, mult)) in active.iter().enumerate() {
                if idx >= meq && r[slot] > 1e-12 {
                    let t = mult / r[slot];
                    if t < t1 {
                        t1 = t;
                        drop = Some(slot);
                    }
                }
            }
            // Primal step that lands exactly on the new row.
            let t2 = if za > 1e-12 * curvature {
                -s_p / za
            } else {
                f64::INFINITY
            };

            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(Error::Optimization(format!(
                    "QP constraints are infeasible (row {p} cannot be satisfied)"
                )));
            }

            for (slot, entry) in active.iter_mut().enumerate() {
                entry.2 -= t * r[slot];
            }
            u_p += t;
            if t2.is_finite() {
                d += &z * t;
            }

            if t2 <= t1 {
                active.push((p, sign_p, u_p));
                continue 'outer;
            }
            active.remove(drop.expect("finite dual step without a row to drop"));
        }
    }

    let mut multipliers = vec![0.0; m];
    let mut active_rows: Vec<usize> = Vec::with_capacity(active.len());
    for &(idx, sign, mult) in &active {
        multipliers[idx] = sign * mult;
        active_rows.push(idx);
    }
    active_rows.sort_unstable();
    Ok(QpSolution {
        d,
        multipliers,
        active: active_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn near(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn unconstrained_qp_returns_newton_point() {
        let b = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        let g = DVector::from_row_slice(&[-2.0, -8.0]);
        let sol = solve_qp(&b, &g, &DMatrix::zeros(0, 2), &DVector::zeros(0), 0).unwrap();
        near(sol.d[0], 1.0, 1e-12);
        near(sol.d[1], 2.0, 1e-12);
        assert!(sol.active.is_empty());
    }

    #[test]
    fn equality_constrained_qp_matches_kkt_solve() {
        // min ½‖d‖² s.t. d₁ + d₂ + d₃ = 3 → d = (1,1,1), multiplier 1.
        let b = DMatrix::identity(3, 3);
        let g = DVector::zeros(3);
        let rows = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
        let rhs = DVector::from_row_slice(&[3.0]);
        let sol = solve_qp(&b, &g, &rows, &rhs, 1).unwrap();
        for i in 0..3 {
            near(sol.d[i], 1.0, 1e-12);
        }
        near(sol.multipliers[0], 1.0, 1e-12);
    }

    #[test]
    fn active_inequality_gets_nonnegative_multiplier() {
        // min ½(d₁−3)² + (d₂−2)² s.t. d₁ ≤ 1 (as −d₁ ≥ −1).
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let g = DVector::from_row_slice(&[-3.0, -4.0]);
        let rows = DMatrix::from_row_slice(1, 2, &[-1.0, 0.0]);
        let rhs = DVector::from_row_slice(&[-1.0]);
        let sol = solve_qp(&b, &g, &rows, &rhs, 0).unwrap();
        near(sol.d[0], 1.0, 1e-12);
        near(sol.d[1], 2.0, 1e-12);
        assert!(sol.multipliers[0] >= 0.0);
        near(sol.multipliers[0], 2.0, 1e-12);
        assert_eq!(sol.active, vec![0]);
    }

    #[test]
    fn inactive_constraints_are_ignored() {
        let b = DMatrix::identity(2, 2);
        let g = DVector::from_row_slice(&[-1.0, -1.0]);
        // d ≥ −5 componentwise is slack at the minimiser (1, 1).
        let rows = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let rhs = DVector::from_row_slice(&[-5.0, -5.0]);
        let sol = solve_qp(&b, &g, &rows, &rhs, 0).unwrap();
        near(sol.d[0], 1.0, 1e-12);
        near(sol.d[1], 1.0, 1e-12);
        assert!(sol.active.is_empty());
        assert_eq!(sol.multipliers, vec![0.0, 0.0]);
    }

    #[test]
    fn contradictory_rows_are_reported_infeasible() {
        let b = DMatrix::identity(1, 1);
        let g = DVector::zeros(1);
        // d ≥ 1 and −d ≥ 1 cannot hold together.
        let rows = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let rhs = DVector::from_row_slice(&[1.0, 1.0]);
        let err = solve_qp(&b, &g, &rows, &rhs, 0).unwrap_err();
        assert!(err.to_string().contains("infeasible"), "{err}");
    }

    #[test]
    fn dependent_consistent_equalities_are_tolerated() {
        // The same plane twice: solvable, second row redundant.
        let b = DMatrix::identity(2, 2);
        let g = DVector::zeros(2);
        let rows = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        let rhs = DVector::from_row_slice(&[2.0, 4.0]);
        let sol = solve_qp(&b, &g, &rows, &rhs, 2).unwrap();
        near(sol.d[0], 1.0, 1e-10);
        near(sol.d[1], 1.0, 1e-10);
    }

    proptest! {
        /// Random SPD objectives with a constraint box built around a known
        /// interior point are always feasible; the returned point must
        /// satisfy the KKT conditions.
        #[test]
        fn random_feasible_qps_satisfy_kkt(seed in 0u64..64) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
            let n = rng.gen_range(2..5usize);
            let m = rng.gen_range(1..6usize);
            let mut mat = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    mat[(i, j)] = rng.gen_range(-1.0..1.0);
                }
            }
            let b = &mat * mat.transpose() + DMatrix::identity(n, n);
            let g = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
            let feasible = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let mut rows = DMatrix::zeros(m, n);
            let mut rhs = DVector::zeros(m);
            for i in 0..m {
                for j in 0..n {
                    rows[(i, j)] = rng.gen_range(-1.0..1.0);
                }
                // aᵀ·feasible ≥ rhs by a random slack, so the QP is feasible.
                rhs[i] = rows.row(i).dot(&feasible.transpose()) - rng.gen_range(0.0..1.0);
            }
            let sol = solve_qp(&b, &g, &rows, &rhs, 0).unwrap();

            // Feasibility and complementary slackness.
            for i in 0..m {
                let s = rows.row(i).dot(&sol.d.transpose()) - rhs[i];
                prop_assert!(s >= -1e-8, "row {i} violated by {s}");
                prop_assert!(sol.multipliers[i] >= -1e-12);
                prop_assert!(sol.multipliers[i] * s <= 1e-8);
            }
            // Stationarity: B d + g = Σ uᵢ aᵢ.
            let mut res = &b * &sol.d + &g;
            for i in 0..m {
                res -= rows.row(i).transpose() * sol.multipliers[i];
            }
            prop_assert!(res.amax() <= 1e-8, "stationarity residual {}", res.amax());
        }
    }
}
