use super::lu::SparseLu;
use super::sparse::CscMatrix;
use crate::{Error, Result};

/// Problem interface for [`newton_solve`]: residual and consistent tangent
/// at a given state.
pub trait NonlinearSystem {
    fn ndof(&self) -> usize;
    fn residual(&mut self, d: &[f64]) -> Result<Vec<f64>>;
    fn residual_and_stiffness(&mut self, d: &[f64]) -> Result<(Vec<f64>, CscMatrix)>;
    /// Scalar potential whose gradient is the residual, if the system has
    /// one. When available it serves as the line-search merit function:
    /// `‖R‖` may legitimately spike while the energy still descends (e.g.
    /// membrane stress activating on a flat sheet), so backtracking on the
    /// energy accepts steps a residual-norm test would strangle.
    fn potential(&mut self, _d: &[f64]) -> Result<Option<f64>> {
        Ok(None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LineSearch {
    None,
    /// Step halving until sufficient decrease of `‖R‖`.
    Backtracking { max_halvings: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonSettings {
    /// Convergence when `‖R‖ ≤ max(rel_tol·‖R₀‖, abs_tol)`.
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_iter: usize,
    pub line_search: LineSearch,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        NewtonSettings {
            rel_tol: 1e-6,
            abs_tol: 1e-12,
            max_iter: 30,
            line_search: LineSearch::Backtracking { max_halvings: 8 },
        }
    }
}

#[derive(Debug)]
pub struct NewtonReport {
    pub d: Vec<f64>,
    /// `‖R‖` at every outer convergence check; `iterations()` is its length.
    pub residual_history: Vec<f64>,
    /// Factorization of the tangent at the converged state, reusable for
    /// adjoint (transpose) solves.
    pub factor: SparseLu,
    pub stiffness: CscMatrix,
}

impl NewtonReport {
    pub fn iterations(&self) -> usize {
        self.residual_history.len()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Newton–Raphson on `R(d) = 0` with optional backtracking line search.
///
/// Deterministic given inputs; on failure the error carries the residual
/// history rather than returning a stale state.
pub fn newton_solve<S: NonlinearSystem + ?Sized>(
    sys: &mut S,
    d0: Vec<f64>,
    settings: &NewtonSettings,
) -> Result<NewtonReport> {
    if !(settings.rel_tol > 0.0) || !(settings.abs_tol > 0.0) {
        return Err(Error::Optimization(
            "Newton tolerances must be positive".into(),
        ));
    }
    let mut d = d0;
    if d.len() != sys.ndof() {
        return Err(Error::DimensionMismatch(format!(
            "initial guess has {} entries, system has {} dofs",
            d.len(),
            sys.ndof()
        )));
    }
    let mut history: Vec<f64> = Vec::new();
    let mut r0_norm = f64::NAN;

    loop {
        let (r, k) = sys.residual_and_stiffness(&d)?;
        let rnorm = norm(&r);
        if history.is_empty() {
            r0_norm = rnorm;
        }
        history.push(rnorm);
        let tol = (settings.rel_tol * r0_norm).max(settings.abs_tol);
        if rnorm <= tol {
            let factor = SparseLu::factor(&k)?;
            return Ok(NewtonReport {
                d,
                residual_history: history,
                factor,
                stiffness: k,
            });
        }
        if history.len() > settings.max_iter {
            return Err(Error::NewtonDiverged {
                iterations: history.len() - 1,
                history,
            });
        }

        let factor = SparseLu::factor(&k)?;
        let neg_r: Vec<f64> = r.iter().map(|x| -x).collect();
        let step = factor.solve(&neg_r);

        // Energy merit data: Armijo slope along the Newton direction is
        // `R·Δd` (the directional derivative of the potential).
        let merit0 = match settings.line_search {
            LineSearch::None => None,
            LineSearch::Backtracking { .. } => sys.potential(&d)?,
        };
        let slope: f64 = r.iter().zip(&step).map(|(ri, si)| ri * si).sum();

        let mut alpha = 1.0;
        let mut halvings = 0;
        let mut force_full = false;
        loop {
            let trial: Vec<f64> = d
                .iter()
                .zip(&step)
                .map(|(di, si)| di + alpha * si)
                .collect();
            let accept = match settings.line_search {
                LineSearch::None => true,
                LineSearch::Backtracking { max_halvings } => {
                    if force_full {
                        true
                    } else {
                        let sufficient = match merit0 {
                            // Energy Armijo test when the slope confirms a
                            // descent direction.
                            Some(pi0) if slope < 0.0 => {
                                let pi = sys.potential(&trial)?.unwrap_or(f64::INFINITY);
                                pi <= pi0 + 1e-4 * alpha * slope
                            }
                            // Fall back to residual-norm decrease.
                            _ => {
                                let trial_norm = norm(&sys.residual(&trial)?);
                                trial_norm < rnorm * (1.0 - 1e-4 * alpha) || trial_norm <= tol
                            }
                        };
                        if sufficient {
                            true
                        } else {
                            halvings += 1;
                            if halvings > max_halvings {
                                // No fraction of the step passes the merit
                                // test; take the full Newton step
                                // non-monotonically and let the iteration
                                // cap catch true divergence.
                                alpha = 1.0;
                                force_full = true;
                            } else {
                                alpha *= 0.5;
                            }
                            false
                        }
                    }
                }
            };
            if accept {
                d = trial;
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::sparse::Triplets;
    use approx::assert_relative_eq;

    /// Cubic springs: R_i(d) = k_i d_i + c_i d_i^3 - f_i.
    struct Springs {
        k: Vec<f64>,
        c: Vec<f64>,
        f: Vec<f64>,
    }

    impl NonlinearSystem for Springs {
        fn ndof(&self) -> usize {
            self.k.len()
        }
        fn residual(&mut self, d: &[f64]) -> Result<Vec<f64>> {
            Ok(d.iter()
                .enumerate()
                .map(|(i, &x)| self.k[i] * x + self.c[i] * x * x * x - self.f[i])
                .collect())
        }
        fn residual_and_stiffness(&mut self, d: &[f64]) -> Result<(Vec<f64>, CscMatrix)> {
            let r = self.residual(d)?;
            let mut t = Triplets::new(d.len(), d.len());
            for (i, &x) in d.iter().enumerate() {
                t.push(i, i, self.k[i] + 3.0 * self.c[i] * x * x);
            }
            Ok((r, t.into_csc()))
        }
    }

    #[test]
    fn zero_load_converges_in_one_iteration() {
        let mut sys = Springs {
            k: vec![2.0, 3.0],
            c: vec![1.0, 1.0],
            f: vec![0.0, 0.0],
        };
        let rep = newton_solve(&mut sys, vec![0.0, 0.0], &NewtonSettings::default()).unwrap();
        assert_eq!(rep.iterations(), 1);
        assert_eq!(rep.d, vec![0.0, 0.0]);
    }

    #[test]
    fn linear_problem_converges_in_two_iterations() {
        let mut sys = Springs {
            k: vec![2.0, 5.0, 1.0],
            c: vec![0.0, 0.0, 0.0],
            f: vec![1.0, 2.0, -0.5],
        };
        let rep = newton_solve(&mut sys, vec![0.0; 3], &NewtonSettings::default()).unwrap();
        assert!(rep.iterations() <= 2, "took {}", rep.iterations());
        assert_relative_eq!(rep.d[0], 0.5);
        assert_relative_eq!(rep.d[1], 0.4);
        assert_relative_eq!(rep.d[2], -0.5);
    }

    #[test]
    fn cubic_spring_shows_quadratic_tail() {
        let mut sys = Springs {
            k: vec![1.0],
            c: vec![4.0],
            f: vec![10.0],
        };
        let settings = NewtonSettings {
            rel_tol: 1e-14,
            ..Default::default()
        };
        let rep = newton_solve(&mut sys, vec![0.0], &settings).unwrap();
        let h = &rep.residual_history;
        assert!(h.len() >= 4);
        // Quadratic convergence: ratio r_{n+1} / r_n^2 stays bounded on the tail.
        let tail = &h[h.len() - 3..];
        for w in tail.windows(2) {
            if w[0] > 1e-12 {
                assert!(w[1] <= 10.0 * w[0] * w[0] / h[0], "tail {tail:?}");
            }
        }
        // Monotone after the first accepted step.
        for w in h.windows(2) {
            assert!(w[1] < w[0] || w[1] <= 1e-12);
        }
    }

    #[test]
    fn max_iterations_error_carries_history() {
        // R(d) = atan(d) + 2 never vanishes (|atan| < π/2), and its
        // derivative is positive everywhere, so every Newton step is
        // well-defined but the iteration can never converge.
        struct NoRoot;
        impl NonlinearSystem for NoRoot {
            fn ndof(&self) -> usize {
                1
            }
            fn residual(&mut self, d: &[f64]) -> Result<Vec<f64>> {
                Ok(vec![d[0].atan() + 2.0])
            }
            fn residual_and_stiffness(&mut self, d: &[f64]) -> Result<(Vec<f64>, CscMatrix)> {
                let r = self.residual(d)?;
                let mut t = Triplets::new(1, 1);
                t.push(0, 0, 1.0 / (1.0 + d[0] * d[0]));
                Ok((r, t.into_csc()))
            }
        }
        let settings = NewtonSettings {
            max_iter: 8,
            ..Default::default()
        };
        let err = newton_solve(&mut NoRoot, vec![0.0], &settings).unwrap_err();
        match err {
            Error::NewtonDiverged { history, .. } => assert!(!history.is_empty()),
            other => panic!("unexpected {other:?}"),
        }
    }
}
