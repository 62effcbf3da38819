use super::kernel::qp_potential;
use super::patch::{ElementContext, ShellPatch};
use crate::ad::{tri, vec3, AdDim, Grad, Hess, Scalar};
use crate::par::try_map;
use crate::solver::{
    newton_solve, CscMatrix, NewtonReport, NewtonSettings, NonlinearSystem, Triplets,
};
use crate::{Error, Result};

/// Result of a full assembly pass over one patch.
#[derive(Debug)]
pub struct PatchAssembly {
    pub internal_energy: f64,
    pub external_work: f64,
    pub residual: Vec<f64>,
    pub stiffness: CscMatrix,
    /// `∂R/∂P` — rows are displacement dofs, columns control-point dofs.
    pub cp_jacobian: CscMatrix,
}

/// Seeded element state: support control points and displacement
/// coefficients as AD scalars, with displacement dofs first.
fn seed_element<S: Scalar>(
    el: &ElementContext,
    patch: &ShellPatch,
    d: &[f64],
    seed_disp: bool,
    seed_geom: bool,
) -> (Vec<[S; 3]>, Vec<[S; 3]>) {
    let nen = el.support.len();
    let n_disp = if seed_disp { 3 * nen } else { 0 };
    let n_total = n_disp + if seed_geom { 3 * nen } else { 0 };
    let dim = AdDim(n_total);
    let cps = patch.surface().control_points();
    let mut geom = Vec::with_capacity(nen);
    let mut disp = Vec::with_capacity(nen);
    for (i, &gi) in el.support.iter().enumerate() {
        let mut gval = [S::zero(), S::zero(), S::zero()];
        let mut dval = [S::zero(), S::zero(), S::zero()];
        for k in 0..3 {
            gval[k] = if seed_geom {
                S::var(cps[gi][k], n_disp + 3 * i + k, dim)
            } else {
                S::constant(cps[gi][k])
            };
            dval[k] = if seed_disp {
                S::var(d[3 * gi + k], 3 * i + k, dim)
            } else {
                S::constant(d[3 * gi + k])
            };
        }
        geom.push(gval);
        disp.push(dval);
    }
    (geom, disp)
}

/// Reference midsurface area of one element, `∫ ‖a₁ × a₂‖ dξ`, with the
/// control points seeded as AD variables (three slots per support point).
fn element_reference_area<S: Scalar>(el: &ElementContext, patch: &ShellPatch) -> Result<S> {
    let nen = el.support.len();
    let dim = AdDim(3 * nen);
    let cps = patch.surface().control_points();
    let geom: Vec<[S; 3]> = el
        .support
        .iter()
        .enumerate()
        .map(|(i, &gi)| {
            [
                S::var(cps[gi][0], 3 * i, dim),
                S::var(cps[gi][1], 3 * i + 1, dim),
                S::var(cps[gi][2], 3 * i + 2, dim),
            ]
        })
        .collect();
    let mut area = S::zero();
    for qp in &el.qps {
        let mut a1 = vec3::zero::<S>();
        let mut a2 = vec3::zero::<S>();
        for (i, p) in geom.iter().enumerate() {
            let (ru, rv) = (qp.r[1][i], qp.r[2][i]);
            for k in 0..3 {
                a1[k].add_scaled_assign(&p[k], ru);
                a2[k].add_scaled_assign(&p[k], rv);
            }
        }
        let jac = vec3::norm(&vec3::cross(&a1, &a2));
        if !(jac.value() > 1e-300) {
            return Err(Error::InvalidGeometry(
                "degenerate surface metric (zero Jacobian) at a quadrature point".into(),
            ));
        }
        area.add_scaled_assign(&jac, qp.weight);
    }
    Ok(area)
}

fn element_potential<S: Scalar>(
    el: &ElementContext,
    patch: &ShellPatch,
    d: &[f64],
    seed_disp: bool,
    seed_geom: bool,
) -> Result<(S, S)> {
    let (geom, disp) = seed_element::<S>(el, patch, d, seed_disp, seed_geom);
    let mut w_int = S::zero();
    let mut w_ext = S::zero();
    for qp in &el.qps {
        let (wi, we) = qp_potential(
            qp,
            &geom,
            &disp,
            patch.material(),
            patch.thickness(),
            patch.loads(),
        )?;
        w_int.add_scaled_assign(&wi, 1.0);
        w_ext.add_scaled_assign(&we, 1.0);
    }
    Ok((w_int, w_ext))
}

impl ShellPatch {
    fn check_d(&self, d: &[f64]) -> Result<()> {
        if d.len() != self.ndof() {
            return Err(Error::DimensionMismatch(format!(
                "displacement vector has {} entries, patch has {} dofs",
                d.len(),
                self.ndof()
            )));
        }
        Ok(())
    }

    /// Stored internal energy `½∫ n:ε + m:κ dS` (the optimization
    /// objective; external work is not included).
    pub fn internal_energy(&self, d: &[f64]) -> Result<f64> {
        Ok(self.energies(d)?.0)
    }

    /// `(W_int, W_ext)`; the total potential is their difference.
    pub fn energies(&self, d: &[f64]) -> Result<(f64, f64)> {
        self.check_d(d)?;
        let parts = try_map(self.elements(), |el| {
            element_potential::<f64>(el, self, d, false, false)
        })?;
        Ok(parts
            .into_iter()
            .fold((0.0, 0.0), |acc, (wi, we)| (acc.0 + wi, acc.1 + we)))
    }

    /// Internal energy together with its raw gradients `(W, ∂W/∂d, ∂W/∂P)`.
    ///
    /// Both gradients are over the full dof layout with no boundary-condition
    /// elimination, and external work is excluded — this is the objective
    /// side of the sensitivity chain, where constrained rows are handled by
    /// the state Jacobian instead.
    pub fn internal_energy_gradients(&self, d: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        self.check_d(d)?;
        let parts = try_map(self.elements(), |el| {
            element_potential::<Grad>(el, self, d, true, true)
        })?;
        let n = self.ndof();
        let mut w = 0.0;
        let mut grad_d = vec![0.0; n];
        let mut grad_p = vec![0.0; n];
        for (el, (wi, _)) in self.elements().iter().zip(&parts) {
            w += wi.v;
            let nen = el.support.len();
            for (i, &gi) in el.support.iter().enumerate() {
                for k in 0..3 {
                    grad_d[3 * gi + k] += wi.g.get(3 * i + k).unwrap_or(&0.0);
                    grad_p[3 * gi + k] += wi.g.get(3 * nen + 3 * i + k).unwrap_or(&0.0);
                }
            }
        }
        Ok((w, grad_d, grad_p))
    }

    /// Material volume of the reference shell, `t ∫ ‖a₁ × a₂‖ dξ`.
    pub fn volume(&self) -> Result<f64> {
        let parts = try_map(self.elements(), |el| {
            element_reference_area::<f64>(el, self)
        })?;
        Ok(self.thickness() * parts.into_iter().sum::<f64>())
    }

    /// Shell volume and its gradient with respect to control-point
    /// coordinates (same dof layout as the displacement vector).
    pub fn volume_and_gradient(&self) -> Result<(f64, Vec<f64>)> {
        let parts = try_map(self.elements(), |el| {
            element_reference_area::<Grad>(el, self)
        })?;
        let t = self.thickness();
        let mut volume = 0.0;
        let mut grad = vec![0.0; self.ndof()];
        for (el, area) in self.elements().iter().zip(&parts) {
            volume += area.v;
            for (i, &gi) in el.support.iter().enumerate() {
                for k in 0..3 {
                    grad[3 * gi + k] += t * area.g.get(3 * i + k).unwrap_or(&0.0);
                }
            }
        }
        Ok((volume * t, grad))
    }

    /// Equilibrium residual `∂(W_int − W_ext)/∂d`, with fixed-dof rows
    /// replaced by `d_i` (driving constrained dofs to zero).
    pub fn residual(&self, d: &[f64]) -> Result<Vec<f64>> {
        self.check_d(d)?;
        let parts = try_map(self.elements(), |el| {
            element_potential::<Grad>(el, self, d, true, false)
        })?;
        let mut r = vec![0.0; self.ndof()];
        for (el, (wi, we)) in self.elements().iter().zip(&parts) {
            let g_int = &wi.g;
            let g_ext = &we.g;
            for (i, &gi) in el.support.iter().enumerate() {
                for k in 0..3 {
                    let l = 3 * i + k;
                    r[3 * gi + k] += g_int.get(l).unwrap_or(&0.0) - g_ext.get(l).unwrap_or(&0.0);
                }
            }
        }
        for &dof in self.fixed_dofs() {
            r[dof] = d[dof];
        }
        Ok(r)
    }

    /// Residual and consistent tangent `K = ∂R/∂d`; fixed dofs are
    /// eliminated symmetrically (unit diagonal, zeroed row and column).
    pub fn residual_and_stiffness(&self, d: &[f64]) -> Result<(Vec<f64>, CscMatrix)> {
        self.check_d(d)?;
        let parts = try_map(self.elements(), |el| {
            element_potential::<Hess>(el, self, d, true, false)
        })?;
        let n = self.ndof();
        let fixed = self.fixed_mask();
        let mut r = vec![0.0; n];
        let mut k_trip = Triplets::new(n, n);
        for (el, (wi, we)) in self.elements().iter().zip(&parts) {
            let nen = el.support.len();
            let nl = 3 * nen;
            let dof = |l: usize| 3 * el.support[l / 3] + l % 3;
            for li in 0..nl {
                let gi = dof(li);
                r[gi] += wi.g.get(li).unwrap_or(&0.0) - we.g.get(li).unwrap_or(&0.0);
                if fixed[gi] {
                    continue;
                }
                for lj in 0..nl {
                    let gj = dof(lj);
                    if fixed[gj] {
                        continue;
                    }
                    let t = tri(li.max(lj), li.min(lj));
                    let v = wi.h.get(t).unwrap_or(&0.0) - we.h.get(t).unwrap_or(&0.0);
                    k_trip.push(gi, gj, v);
                }
            }
        }
        for dof in 0..n {
            if fixed[dof] {
                r[dof] = d[dof];
                k_trip.push(dof, dof, 1.0);
            }
        }
        Ok((r, k_trip.into_csc()))
    }

    /// `∂R/∂P`: derivative of the residual with respect to control-point
    /// coordinates (geometry dependence of metrics, curvatures, Jacobians
    /// and loads included). Fixed-dof rows are zero.
    pub fn d_residual_d_cp(&self, d: &[f64]) -> Result<CscMatrix> {
        Ok(self.assemble_full(d)?.cp_jacobian)
    }

    /// One combined second-order pass: energies, residual, stiffness and
    /// control-point Jacobian.
    pub fn assemble_full(&self, d: &[f64]) -> Result<PatchAssembly> {
        self.assemble_impl(d, true, true)
    }

    /// Assembly without boundary-condition elimination, for embedding the
    /// patch into a coupled multi-patch system that applies its own
    /// constraints after adding interface terms. The control-point Jacobian
    /// is only populated when `with_cp_jacobian` is set.
    pub fn assemble_raw(&self, d: &[f64], with_cp_jacobian: bool) -> Result<PatchAssembly> {
        self.assemble_impl(d, with_cp_jacobian, false)
    }

    fn assemble_impl(
        &self,
        d: &[f64],
        seed_geom: bool,
        apply_bcs: bool,
    ) -> Result<PatchAssembly> {
        self.check_d(d)?;
        let parts = try_map(self.elements(), |el| {
            element_potential::<Hess>(el, self, d, true, seed_geom)
        })?;
        let n = self.ndof();
        let fixed = if apply_bcs {
            self.fixed_mask()
        } else {
            vec![false; n]
        };
        let mut internal_energy = 0.0;
        let mut external_work = 0.0;
        let mut r = vec![0.0; n];
        let mut k_trip = Triplets::new(n, n);
        let mut j_trip = Triplets::new(n, n);
        for (el, (wi, we)) in self.elements().iter().zip(&parts) {
            internal_energy += wi.v;
            external_work += we.v;
            let nen = el.support.len();
            let nl = 3 * nen;
            let dof = |l: usize| 3 * el.support[l / 3] + l % 3;
            for li in 0..nl {
                let gi = dof(li);
                r[gi] += wi.g.get(li).unwrap_or(&0.0) - we.g.get(li).unwrap_or(&0.0);
                if fixed[gi] {
                    continue;
                }
                for lj in 0..nl {
                    let gj = dof(lj);
                    // Stiffness block (d, d).
                    if !fixed[gj] {
                        let t = tri(li.max(lj), li.min(lj));
                        let v = wi.h.get(t).unwrap_or(&0.0) - we.h.get(t).unwrap_or(&0.0);
                        k_trip.push(gi, gj, v);
                    }
                    if seed_geom {
                        // Control-point block (d, P): geometry slots follow
                        // the displacement slots in the seed layout.
                        let t = tri(nl + lj, li);
                        let v = wi.h.get(t).unwrap_or(&0.0) - we.h.get(t).unwrap_or(&0.0);
                        j_trip.push(gi, gj, v);
                    }
                }
            }
        }
        if apply_bcs {
            for dof in 0..n {
                if fixed[dof] {
                    r[dof] = d[dof];
                    k_trip.push(dof, dof, 1.0);
                }
            }
        }
        Ok(PatchAssembly {
            internal_energy,
            external_work,
            residual: r,
            stiffness: k_trip.into_csc(),
            cp_jacobian: j_trip.into_csc(),
        })
    }

    fn fixed_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.ndof()];
        for &dof in self.fixed_dofs() {
            mask[dof] = true;
        }
        mask
    }

    /// Newton solve of the single-patch equilibrium.
    pub fn solve(&self, d0: Vec<f64>, settings: &NewtonSettings) -> Result<NewtonReport> {
        newton_solve(&mut PatchSystem(self), d0, settings)
    }
}

/// Adapter exposing a single patch as a nonlinear system.
pub struct PatchSystem<'a>(pub &'a ShellPatch);

impl NonlinearSystem for PatchSystem<'_> {
    fn ndof(&self) -> usize {
        self.0.ndof()
    }
    fn residual(&mut self, d: &[f64]) -> Result<Vec<f64>> {
        self.0.residual(d)
    }
    fn residual_and_stiffness(&mut self, d: &[f64]) -> Result<(Vec<f64>, CscMatrix)> {
        self.0.residual_and_stiffness(d)
    }
    fn potential(&mut self, d: &[f64]) -> Result<Option<f64>> {
        let (wi, we) = self.0.energies(d)?;
        Ok(Some(wi - we))
    }
}
