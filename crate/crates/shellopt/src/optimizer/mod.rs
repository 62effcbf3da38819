//! Gradient-based constrained optimization: a sequential quadratic
//! programming driver with a damped BFGS Hessian, an ℓ₁ merit line search
//! and an active-set QP subproblem, plus a finite-difference gradient
//! checker.
//!
//! The driver minimises `f(x)` subject to `h(x) = 0`, `g(x) ≤ 0` and box
//! bounds.  Bounds are enforced inside the QP subproblem, so every iterate
//! (and every line-search trial) stays inside the box.

mod qp;

pub use qp::{solve_qp, QpSolution};

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

type ValueFn<'a> = Box<dyn FnMut(&[f64]) -> Result<f64> + 'a>;
type VectorFn<'a> = Box<dyn FnMut(&[f64]) -> Result<Vec<f64>> + 'a>;
type JacobianFn<'a> = Box<dyn FnMut(&[f64]) -> Result<DMatrix<f64>> + 'a>;

/// A block of constraints sharing one value callback and one Jacobian
/// callback.
struct ConstraintBlock<'a> {
    len: usize,
    value: VectorFn<'a>,
    jacobian: JacobianFn<'a>,
}

/// Smooth constrained minimisation problem handed to [`sqp_solve`].
///
/// Equality blocks impose `h(x) = 0`, inequality blocks `g(x) ≤ 0`.
/// Bounds default to the whole space, the tolerance to `1e-8` and the
/// iteration budget to 200.
pub struct OptProblem<'a> {
    n: usize,
    objective: ValueFn<'a>,
    gradient: VectorFn<'a>,
    equalities: Vec<ConstraintBlock<'a>>,
    inequalities: Vec<ConstraintBlock<'a>>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    tol: f64,
    max_iter: usize,
}

impl<'a> OptProblem<'a> {
    pub fn new(
        n: usize,
        objective: impl FnMut(&[f64]) -> Result<f64> + 'a,
        gradient: impl FnMut(&[f64]) -> Result<Vec<f64>> + 'a,
    ) -> Self {
        Self {
            n,
            objective: Box::new(objective),
            gradient: Box::new(gradient),
            equalities: Vec::new(),
            inequalities: Vec::new(),
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
            tol: 1e-8,
            max_iter: 200,
        }
    }

    /// Box bounds; entries may be infinite.
    pub fn with_bounds(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != self.n || upper.len() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "bounds have lengths {} and {}, expected {}",
                lower.len(),
                upper.len(),
                self.n
            )));
        }
        for j in 0..self.n {
            if lower[j] > upper[j] {
                return Err(Error::Optimization(format!(
                    "lower bound {} exceeds upper bound {} at variable {j}",
                    lower[j], upper[j]
                )));
            }
        }
        self.lower = lower;
        self.upper = upper;
        Ok(self)
    }

    /// Adds `len` equality constraints `h(x) = 0`.
    pub fn add_equality(
        mut self,
        len: usize,
        value: impl FnMut(&[f64]) -> Result<Vec<f64>> + 'a,
        jacobian: impl FnMut(&[f64]) -> Result<DMatrix<f64>> + 'a,
    ) -> Self {
        self.equalities.push(ConstraintBlock {
            len,
            value: Box::new(value),
            jacobian: Box::new(jacobian),
        });
        self
    }

    /// Adds `len` inequality constraints `g(x) ≤ 0`.
    pub fn add_inequality(
        mut self,
        len: usize,
        value: impl FnMut(&[f64]) -> Result<Vec<f64>> + 'a,
        jacobian: impl FnMut(&[f64]) -> Result<DMatrix<f64>> + 'a,
    ) -> Self {
        self.inequalities.push(ConstraintBlock {
            len,
            value: Box::new(value),
            jacobian: Box::new(jacobian),
        });
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn num_variables(&self) -> usize {
        self.n
    }

    fn num_eq(&self) -> usize {
        self.equalities.iter().map(|b| b.len).sum()
    }

    fn num_ineq(&self) -> usize {
        self.inequalities.iter().map(|b| b.len).sum()
    }
}

/// State of one accepted iterate, appended once per iterate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    /// Iteration index, starting at 0 for the initial point.
    pub iter: usize,
    /// Objective value at the iterate.
    pub objective: f64,
    /// Max-norm of the constraint violation (equalities and violated
    /// inequalities; bounds are always satisfied).
    pub constraint_violation: f64,
    /// Euclidean length of the step that produced this iterate (0 for the
    /// initial point).
    pub step_norm: f64,
    /// Max-norm of the Lagrangian gradient with the QP multipliers.
    pub kkt_residual: f64,
}

/// Result of [`sqp_solve`].
#[derive(Debug, Clone)]
pub struct OptReport {
    /// Final iterate.
    pub x: Vec<f64>,
    /// Objective at the final iterate.
    pub objective: f64,
    /// Whether the KKT residual and constraint violation both dropped
    /// below the tolerance.
    pub converged: bool,
    /// One record per accepted iterate, including the initial point.
    pub history: Vec<IterationRecord>,
    /// ℓ₁ merit value (before, after) for every accepted step, measured
    /// with the penalty parameter in force at that step.
    pub merit_steps: Vec<(f64, f64)>,
}

/// Fully evaluated problem data at one point.
struct Eval {
    f: f64,
    g: DVector<f64>,
    ce: DVector<f64>,
    ci: DVector<f64>,
    ae: DMatrix<f64>,
    ai: DMatrix<f64>,
}

fn snapshot(x: &[f64]) -> String {
    if x.len() <= 8 {
        format!("{x:?}")
    } else {
        let head: Vec<f64> = x[..8].to_vec();
        format!("{head:?}… ({} variables)", x.len())
    }
}

fn check_scalar(name: &str, v: f64, x: &[f64]) -> Result<f64> {
    if v.is_nan() {
        return Err(Error::Optimization(format!(
            "{name} returned NaN at iterate {}",
            snapshot(x)
        )));
    }
    Ok(v)
}

fn check_vector(name: &str, expect: usize, v: Vec<f64>, x: &[f64]) -> Result<Vec<f64>> {
    if v.len() != expect {
        return Err(Error::Optimization(format!(
            "{name} returned length {}, expected {expect}",
            v.len()
        )));
    }
    if v.iter().any(|e| e.is_nan()) {
        return Err(Error::Optimization(format!(
            "{name} returned NaN at iterate {}",
            snapshot(x)
        )));
    }
    Ok(v)
}

fn eval_constraint_values(problem: &mut OptProblem<'_>, x: &[f64]) -> Result<(DVector<f64>, DVector<f64>)> {
    let mut ce = Vec::with_capacity(problem.num_eq());
    for block in problem.equalities.iter_mut() {
        ce.extend(check_vector("equality constraint", block.len, (block.value)(x)?, x)?);
    }
    let mut ci = Vec::with_capacity(problem.num_ineq());
    for block in problem.inequalities.iter_mut() {
        ci.extend(check_vector("inequality constraint", block.len, (block.value)(x)?, x)?);
    }
    Ok((DVector::from_vec(ce), DVector::from_vec(ci)))
}

fn eval_value(problem: &mut OptProblem<'_>, x: &[f64]) -> Result<(f64, DVector<f64>, DVector<f64>)> {
    let f = check_scalar("objective", (problem.objective)(x)?, x)?;
    let (ce, ci) = eval_constraint_values(problem, x)?;
    Ok((f, ce, ci))
}

fn stack_jacobians(
    blocks: &mut [ConstraintBlock<'_>],
    n: usize,
    x: &[f64],
    name: &str,
) -> Result<DMatrix<f64>> {
    let total: usize = blocks.iter().map(|b| b.len).sum();
    let mut out = DMatrix::zeros(total, n);
    let mut row = 0;
    for block in blocks.iter_mut() {
        let jac = (block.jacobian)(x)?;
        if jac.nrows() != block.len || jac.ncols() != n {
            return Err(Error::Optimization(format!(
                "{name} Jacobian is {}x{}, expected {}x{n}",
                jac.nrows(),
                jac.ncols(),
                block.len
            )));
        }
        if jac.iter().any(|e| e.is_nan()) {
            return Err(Error::Optimization(format!(
                "{name} Jacobian returned NaN at iterate {}",
                snapshot(x)
            )));
        }
        out.view_mut((row, 0), (block.len, n)).copy_from(&jac);
        row += block.len;
    }
    Ok(out)
}

fn eval_full(problem: &mut OptProblem<'_>, x: &[f64]) -> Result<Eval> {
    let (f, ce, ci) = eval_value(problem, x)?;
    if !f.is_finite() {
        return Err(Error::Optimization(format!(
            "objective is not finite at iterate {}",
            snapshot(x)
        )));
    }
    let g = check_vector("gradient", problem.n, (problem.gradient)(x)?, x)?;
    let ae = stack_jacobians(&mut problem.equalities, problem.n, x, "equality")?;
    let ai = stack_jacobians(&mut problem.inequalities, problem.n, x, "inequality")?;
    Ok(Eval {
        f,
        g: DVector::from_vec(g),
        ce,
        ci,
        ae,
        ai,
    })
}

fn violation_l1(ce: &DVector<f64>, ci: &DVector<f64>) -> f64 {
    ce.iter().map(|c| c.abs()).sum::<f64>() + ci.iter().map(|c| c.max(0.0)).sum::<f64>()
}

fn violation_inf(ce: &DVector<f64>, ci: &DVector<f64>) -> f64 {
    let e = ce.iter().fold(0.0_f64, |m, c| m.max(c.abs()));
    let i = ci.iter().fold(0.0_f64, |m, c| m.max(c.max(0.0)));
    e.max(i)
}

/// Linearised constraint rows in the `≥` convention of [`solve_qp`]:
/// equalities first, then inequalities, then the finite bound rows.
fn linearized_rows(
    problem: &OptProblem<'_>,
    x: &DVector<f64>,
    eval: &Eval,
) -> (DMatrix<f64>, DVector<f64>, usize) {
    let n = problem.n;
    let me = eval.ce.len();
    let mi = eval.ci.len();
    let mut nb = 0;
    for j in 0..n {
        if problem.lower[j].is_finite() {
            nb += 1;
        }
        if problem.upper[j].is_finite() {
            nb += 1;
        }
    }
    let mut rows = DMatrix::zeros(me + mi + nb, n);
    let mut rhs = DVector::zeros(me + mi + nb);
    rows.view_mut((0, 0), (me, n)).copy_from(&eval.ae);
    for i in 0..me {
        rhs[i] = -eval.ce[i];
    }
    for i in 0..mi {
        for j in 0..n {
            rows[(me + i, j)] = -eval.ai[(i, j)];
        }
        rhs[me + i] = eval.ci[i];
    }
    let mut r = me + mi;
    for j in 0..n {
        if problem.lower[j].is_finite() {
            rows[(r, j)] = 1.0;
            rhs[r] = problem.lower[j] - x[j];
            r += 1;
        }
        if problem.upper[j].is_finite() {
            rows[(r, j)] = -1.0;
            rhs[r] = x[j] - problem.upper[j];
            r += 1;
        }
    }
    (rows, rhs, me)
}

/// Gradient of the Lagrangian using the functional constraint multipliers
/// (bound rows have constant gradients and cancel in BFGS differences).
fn lagrangian_gradient(eval: &Eval, u: &[f64]) -> DVector<f64> {
    let me = eval.ce.len();
    let mut g = eval.g.clone();
    for i in 0..me {
        g -= eval.ae.row(i).transpose() * u[i];
    }
    for i in 0..eval.ci.len() {
        // Inequality rows enter the QP as −gᵢ, so the multiplier acts on
        // the negated gradient.
        g += eval.ai.row(i).transpose() * u[me + i];
    }
    g
}

/// Least-squares restoration step: reduce the linearised violation of the
/// equalities and the currently violated inequalities inside the bounds.
fn restoration_step(
    problem: &mut OptProblem<'_>,
    x: &DVector<f64>,
    eval: &Eval,
) -> Result<DVector<f64>> {
    let n = problem.n;
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut vals: Vec<f64> = Vec::new();
    for i in 0..eval.ce.len() {
        rows.push(eval.ae.row(i).transpose());
        vals.push(eval.ce[i]);
    }
    for i in 0..eval.ci.len() {
        if eval.ci[i] > 0.0 {
            rows.push(eval.ai.row(i).transpose());
            vals.push(eval.ci[i]);
        }
    }
    if rows.is_empty() {
        return Err(Error::Optimization(
            "QP subproblem infeasible with no violated constraints".into(),
        ));
    }
    let mut bmat = DMatrix::zeros(n, n);
    let mut grad = DVector::zeros(n);
    for (a, &c) in rows.iter().zip(&vals) {
        bmat += a * a.transpose();
        grad += a * c;
    }
    let delta = 1e-8 * bmat.diagonal().amax().max(1e-300);
    for j in 0..n {
        bmat[(j, j)] += delta;
    }
    // Bounds only: d = 0 is feasible, so this QP always has a solution.
    let empty = Eval {
        f: 0.0,
        g: DVector::zeros(n),
        ce: DVector::zeros(0),
        ci: DVector::zeros(0),
        ae: DMatrix::zeros(0, n),
        ai: DMatrix::zeros(0, n),
    };
    let (brow, brhs, _) = linearized_rows(problem, x, &empty);
    let sol = solve_qp(&bmat, &grad, &brow, &brhs, 0)?;

    let (_, ce0, ci0) = eval_value(problem, x.as_slice())?;
    let v0 = violation_l1(&ce0, &ci0);
    let mut alpha = 1.0;
    for _ in 0..20 {
        let trial = clamp_to_bounds(problem, x + &sol.d * alpha);
        let (_, ce, ci) = eval_value(problem, trial.as_slice())?;
        if violation_l1(&ce, &ci) <= v0 * (1.0 - 1e-4 * alpha) {
            return Ok(trial);
        }
        alpha *= 0.5;
    }
    Err(Error::Optimization(format!(
        "restoration could not reduce the constraint violation at iterate {}",
        snapshot(x.as_slice())
    )))
}

fn clamp_to_bounds(problem: &OptProblem<'_>, mut x: DVector<f64>) -> DVector<f64> {
    for j in 0..problem.n {
        x[j] = x[j].clamp(problem.lower[j], problem.upper[j]);
    }
    x
}

/// Sequential quadratic programming with a damped BFGS Hessian and an ℓ₁
/// merit line search.
///
/// Terminates when the KKT residual and the constraint violation both fall
/// below the problem tolerance, or after `max_iter` accepted steps.  The
/// history carries one record per accepted iterate ("complete": the first
/// row is the initial point, the last the returned iterate).  An
/// infeasible QP linearisation triggers a least-squares restoration step,
/// folded into the following record; persistent infeasibility is an error.
/// NaN from any callback aborts with the offending iterate in the message.
pub fn sqp_solve(problem: &mut OptProblem<'_>, x0: &[f64]) -> Result<OptReport> {
    let n = problem.n;
    if x0.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "initial point has length {}, expected {n}",
            x0.len()
        )));
    }
    for j in 0..n {
        if x0[j] < problem.lower[j] || x0[j] > problem.upper[j] {
            return Err(Error::Optimization(format!(
                "initial point outside bounds at variable {j}: {} ∉ [{}, {}]",
                x0[j], problem.lower[j], problem.upper[j]
            )));
        }
    }

    let mut x = DVector::from_column_slice(x0);
    let mut eval = eval_full(problem, x.as_slice())?;
    let mut bmat = DMatrix::<f64>::identity(n, n);
    let mut rho = 1e-12_f64;
    let mut history: Vec<IterationRecord> = Vec::new();
    let mut merit_steps: Vec<(f64, f64)> = Vec::new();
    let mut last_step_norm = 0.0;
    let mut restorations = 0usize;
    let mut converged = false;

    loop {
        let (rows, rhs, meq) = linearized_rows(problem, &x, &eval);
        let qp = match solve_qp(&bmat, &eval.g, &rows, &rhs, meq) {
            Ok(qp) => {
                restorations = 0;
                qp
            }
            Err(Error::Optimization(msg)) if msg.contains("infeasible") => {
                restorations += 1;
                if restorations > 3 {
                    return Err(Error::Optimization(format!(
                        "QP subproblem stayed infeasible after {} restoration steps: {msg}",
                        restorations - 1
                    )));
                }
                let restored = restoration_step(problem, &x, &eval).map_err(|e| {
                    Error::Optimization(format!("QP subproblem infeasible ({msg}); {e}"))
                })?;
                last_step_norm += (&restored - &x).norm();
                x = restored;
                eval = eval_full(problem, x.as_slice())?;
                continue;
            }
            Err(e) => return Err(e),
        };

        // KKT residual of the nonlinear problem with the QP multipliers:
        // ∇f − Σ uᵢ aᵢ, which equals −B·d at the QP optimum.
        let mut kkt_vec = eval.g.clone();
        for i in 0..rows.nrows() {
            if qp.multipliers[i] != 0.0 {
                kkt_vec -= rows.row(i).transpose() * qp.multipliers[i];
            }
        }
        let kkt = kkt_vec.amax();
        let viol = violation_inf(&eval.ce, &eval.ci);
        let iter = history.len();
        history.push(IterationRecord {
            iter,
            objective: eval.f,
            constraint_violation: viol,
            step_norm: last_step_norm,
            kkt_residual: kkt,
        });

        if kkt <= problem.tol && viol <= problem.tol {
            converged = true;
            break;
        }
        if iter >= problem.max_iter {
            break;
        }

        // Exact-penalty parameter: keep it above the multipliers of the
        // functional constraints (bound rows never enter the merit).
        let mcons = eval.ce.len() + eval.ci.len();
        let needed = qp.multipliers[..mcons]
            .iter()
            .fold(0.0_f64, |m, u| m.max(u.abs()));
        rho = rho.max(1.2 * needed + 1e-12);

        let d = qp.d;
        let phi0 = eval.f + rho * violation_l1(&eval.ce, &eval.ci);
        let dir_deriv = eval.g.dot(&d) - rho * violation_l1(&eval.ce, &eval.ci);

        // Merit of a trial step; NaN is a hard error, ±∞ just rejects the
        // trial.  Callback failures are remembered so a doomed line search
        // reports the inner cause.
        let mut trial_error: Option<Error> = None;
        let mut merit_at = |problem: &mut OptProblem<'_>,
                            alpha: f64,
                            trial_error: &mut Option<Error>|
         -> Result<Option<(DVector<f64>, f64, f64)>> {
            let trial = clamp_to_bounds(problem, &x + &d * alpha);
            match eval_value(problem, trial.as_slice()) {
                Ok((f, ce, ci)) => {
                    let phi = f + rho * violation_l1(&ce, &ci);
                    Ok(Some((trial, f, phi)))
                }
                Err(e @ Error::Optimization(_)) => {
                    if e.to_string().contains("NaN") {
                        return Err(e);
                    }
                    *trial_error = Some(e);
                    Ok(None)
                }
                Err(e) => {
                    *trial_error = Some(e);
                    Ok(None)
                }
            }
        };

        let armijo = |alpha: f64, phi: f64| phi <= phi0 + 1e-4 * alpha * dir_deriv;

        let full = merit_at(problem, 1.0, &mut trial_error)?;
        // Quadratic interpolation through φ(0), φ'(0) and φ(1); exact for
        // quadratic merits, so BFGS keeps its quadratic termination.
        let mut accepted: Option<(f64, DVector<f64>, f64, f64)> = None;
        if let Some((trial, f, phi)) = &full {
            let denom = *phi - phi0 - dir_deriv;
            if dir_deriv < 0.0 && denom > 0.0 {
                let aq = (-dir_deriv / (2.0 * denom)).clamp(1e-3, 1.0);
                if (aq - 1.0).abs() > 1e-12 {
                    if let Some((t2, f2, phi2)) = merit_at(problem, aq, &mut trial_error)? {
                        if armijo(aq, phi2) && phi2 <= *phi {
                            accepted = Some((aq, t2, f2, phi2));
                        }
                    }
                }
            }
            if accepted.is_none() && armijo(1.0, *phi) {
                accepted = Some((1.0, trial.clone(), *f, *phi));
            }
        }
        if accepted.is_none() {
            let mut alpha = 0.5;
            for _ in 0..30 {
                if let Some((trial, f, phi)) = merit_at(problem, alpha, &mut trial_error)? {
                    if armijo(alpha, phi) {
                        accepted = Some((alpha, trial, f, phi));
                        break;
                    }
                }
                alpha *= 0.5;
            }
        }
        let Some((alpha, x_new, _f_new, phi_new)) = accepted else {
            let cause = trial_error
                .map(|e| format!(": {e}"))
                .unwrap_or_default();
            return Err(Error::Optimization(format!(
                "line search failed at iterate {}{cause}",
                snapshot(x.as_slice())
            )));
        };
        merit_steps.push((phi0, phi_new));

        let eval_new = eval_full(problem, x_new.as_slice())?;
        let s = &x_new - &x;
        last_step_norm = s.norm();

        // Damped BFGS update on the Lagrangian gradient difference.
        let u = &qp.multipliers[..mcons];
        let mut y = lagrangian_gradient(&eval_new, u) - lagrangian_gradient(&eval, u);
        let bs = &bmat * &s;
        let sbs = s.dot(&bs);
        if last_step_norm > 1e-16 * (1.0 + x.norm()) && sbs > 0.0 {
            let sy = s.dot(&y);
            if sy < 0.2 * sbs {
                let theta = 0.8 * sbs / (sbs - sy);
                y = &y * theta + &bs * (1.0 - theta);
            }
            let sy = s.dot(&y);
            if sy > 1e-300 {
                bmat += &y * y.transpose() / sy - &bs * bs.transpose() / sbs;
                // Keep the matrix exactly symmetric against drift.
                bmat = (&bmat + bmat.transpose()) * 0.5;
            }
        }

        x = x_new;
        eval = eval_new;
    }

    Ok(OptReport {
        objective: eval.f,
        x: x.as_slice().to_vec(),
        converged,
        history,
        merit_steps,
    })
}

/// One row of a gradient check: analytic derivative against a central
/// difference.
#[derive(Debug, Clone, Copy)]
pub struct GradientCheckEntry {
    pub variable: usize,
    pub analytic: f64,
    pub finite_difference: f64,
    pub rel_error: f64,
}

/// Gradient check report, sorted by decreasing relative error.
#[derive(Debug, Clone)]
pub struct GradientReport {
    pub entries: Vec<GradientCheckEntry>,
}

impl GradientReport {
    /// Largest relative discrepancy (0 for an empty problem).
    pub fn max_rel_error(&self) -> f64 {
        self.entries.first().map(|e| e.rel_error).unwrap_or(0.0)
    }
}

/// Compares the analytic objective gradient against central differences
/// with per-variable steps `step·max(1, |xⱼ|)`.
///
/// The report is sorted by decreasing relative error (ties by variable
/// index), so the first entry is the most suspicious derivative.
pub fn check_gradients(
    problem: &mut OptProblem<'_>,
    point: &[f64],
    step: f64,
) -> Result<GradientReport> {
    let n = problem.n;
    if point.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "point has length {}, expected {n}",
            point.len()
        )));
    }
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::GradientCheck(format!("invalid step {step}")));
    }
    let analytic = check_vector("gradient", n, (problem.gradient)(point)?, point)?;
    let mut entries = Vec::with_capacity(n);
    let mut xp = point.to_vec();
    for j in 0..n {
        let h = step * point[j].abs().max(1.0);
        xp[j] = point[j] + h;
        let fp = check_scalar("objective", (problem.objective)(&xp)?, &xp)?;
        xp[j] = point[j] - h;
        let fm = check_scalar("objective", (problem.objective)(&xp)?, &xp)?;
        xp[j] = point[j];
        let fd = (fp - fm) / (2.0 * h);
        let rel = if analytic[j] == fd {
            0.0
        } else {
            (analytic[j] - fd).abs() / analytic[j].abs().max(fd.abs())
        };
        entries.push(GradientCheckEntry {
            variable: j,
            analytic: analytic[j],
            finite_difference: fd,
            rel_error: rel,
        });
    }
    entries.sort_by(|a, b| {
        b.rel_error
            .partial_cmp(&a.rel_error)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.variable.cmp(&b.variable))
    });
    Ok(GradientReport { entries })
}
