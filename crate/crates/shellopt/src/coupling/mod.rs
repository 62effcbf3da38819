//! Penalty coupling of non-matching shell patches.
//!
//! Patch interfaces discovered by the geometry module are discretized into
//! quadrature meshes ([`QuadratureMesh`]); displacement and rotation jumps
//! across each interface are penalized, and the penalty terms are
//! assembled into the global residual and stiffness together with the
//! per-patch shell terms. For differentiable (interior-crossing)
//! intersections, [`XiSystem`] relocates the quadrature nodes when the
//! geometry moves and provides the partial derivatives the optimizer's
//! adjoint needs.

mod kernel;
mod mesh;
mod xi;

pub use mesh::{penalty_params, PenaltyParams, QuadratureMesh, DEFAULT_PENALTY_COEFFICIENT};
pub use xi::{pack_nodes, unpack_nodes, PinnedEnd, XiSystem};

use kernel::{element_dims, element_energy, split_slot, SeedMode};
use mesh::PenaltyElement;

use crate::ad::{tri, Grad, Hess};
use crate::geometry::{IntersectionKind, MultiPatchModel};
use crate::par::try_map;
use crate::solver::{
    newton_solve, CscMatrix, NewtonReport, NewtonSettings, NonlinearSystem, Triplets,
};
use crate::{Error, Result};

/// Penalty energy of one intersection: `∫ α_d‖u¹−u²‖² +
/// α_r((sinφ−sinφ₀)² + (cosφ−cosφ₀)²) dL` over the quadrature mesh, with
/// `d` the global displacement vector.
pub fn penalty_energy(
    mesh: &QuadratureMesh,
    model: &MultiPatchModel,
    d: &[f64],
    params: &PenaltyParams,
) -> Result<f64> {
    let offsets = model.dof_offsets();
    let sa = model.patches[mesh.patch_a].surface();
    let sb = model.patches[mesh.patch_b].surface();
    let da = &d[offsets[mesh.patch_a]..offsets[mesh.patch_a + 1]];
    let db = &d[offsets[mesh.patch_b]..offsets[mesh.patch_b + 1]];
    let parts = try_map(&mesh.elements, |el| {
        element_energy::<f64>(el, sa, sb, da, db, params, SeedMode::Disp)
    })?;
    Ok(parts.into_iter().sum())
}

/// Global assembly of a multi-patch model: per-patch shell terms plus
/// interface penalty terms, with partials for the optimizer.
#[derive(Debug)]
pub struct NonMatchingAssembly {
    /// Global dof offset of each patch; last entry is the total count.
    pub dof_offsets: Vec<usize>,
    pub internal_energy: f64,
    pub external_work: f64,
    pub penalty_energy: f64,
    pub residual: Vec<f64>,
    pub stiffness: CscMatrix,
    /// `∂R/∂P` over the global control-point dof layout (identical to the
    /// displacement layout). Boundary-condition rows are zero.
    pub cp_jacobian: CscMatrix,
    /// `∂R/∂ξ̃` per quadrature mesh — `Some` for differentiable
    /// intersections (columns: `[u_a, v_a, u_b, v_b]` per node), `None`
    /// for edge-fixed ones, whose parametric trace never moves.
    pub xi_jacobians: Vec<Option<CscMatrix>>,
}

/// A [`MultiPatchModel`] with one quadrature mesh per intersection and a
/// common penalty coefficient; penalty parameters are frozen per mesh at
/// construction.
#[derive(Debug, Clone)]
pub struct CoupledModel {
    pub model: MultiPatchModel,
    pub meshes: Vec<QuadratureMesh>,
    pub coefficient: f64,
}

impl CoupledModel {
    /// Build quadrature meshes for every stored intersection.
    pub fn new(model: MultiPatchModel, coefficient: f64) -> Result<Self> {
        let meshes = (0..model.intersections.len())
            .map(|i| QuadratureMesh::build(&model, i, coefficient))
            .collect::<Result<Vec<_>>>()?;
        Ok(CoupledModel {
            model,
            meshes,
            coefficient,
        })
    }

    pub fn ndof(&self) -> usize {
        self.model.ndof()
    }

    pub fn dof_offsets(&self) -> Vec<usize> {
        self.model.dof_offsets()
    }

    fn check_d(&self, d: &[f64]) -> Result<()> {
        if d.len() != self.ndof() {
            return Err(Error::DimensionMismatch(format!(
                "displacement vector has {} entries, coupled model has {} dofs",
                d.len(),
                self.ndof()
            )));
        }
        Ok(())
    }

    /// Global fixed-dof mask from the per-patch boundary conditions.
    pub fn fixed_mask(&self) -> Vec<bool> {
        let offsets = self.dof_offsets();
        let mut mask = vec![false; self.ndof()];
        for (p, patch) in self.model.patches.iter().enumerate() {
            for &dof in patch.fixed_dofs() {
                mask[offsets[p] + dof] = true;
            }
        }
        mask
    }

    /// Replace one patch's control points. Quadrature-mesh tables depend
    /// only on parametric coordinates and stay valid; frozen penalty
    /// parameters are deliberately not rescaled. Stored intersection
    /// traces become stale — relocate differentiable ones through
    /// [`XiSystem`] and [`CoupledModel::set_intersection_nodes`].
    pub fn set_control_points(&mut self, patch: usize, cps: Vec<[f64; 3]>) -> Result<()> {
        self.model.patches[patch].set_control_points(cps)
    }

    /// Move one mesh's quadrature nodes (moving-intersection mode),
    /// rebuilding its cached tables.
    pub fn set_intersection_nodes(
        &mut self,
        mesh_index: usize,
        nodes_a: Vec<(f64, f64)>,
        nodes_b: Vec<(f64, f64)>,
    ) -> Result<()> {
        let mesh = self.meshes.get_mut(mesh_index).ok_or_else(|| {
            Error::InvalidGeometry(format!("quadrature mesh index {mesh_index} out of range"))
        })?;
        mesh.rebuild(&self.model, nodes_a, nodes_b)
    }

    /// `(W_int, W_ext, W_pen)` of the coupled model.
    pub fn energies(&self, d: &[f64]) -> Result<(f64, f64, f64)> {
        self.check_d(d)?;
        let offsets = self.dof_offsets();
        let mut w_int = 0.0;
        let mut w_ext = 0.0;
        for (p, patch) in self.model.patches.iter().enumerate() {
            let (wi, we) = patch.energies(&d[offsets[p]..offsets[p + 1]])?;
            w_int += wi;
            w_ext += we;
        }
        let mut w_pen = 0.0;
        for mesh in &self.meshes {
            w_pen += penalty_energy(mesh, &self.model, d, &mesh.params)?;
        }
        Ok((w_int, w_ext, w_pen))
    }

    /// Total potential `W_int − W_ext + W_pen`.
    pub fn potential(&self, d: &[f64]) -> Result<f64> {
        let (wi, we, wp) = self.energies(d)?;
        Ok(wi - we + wp)
    }

    /// Global residual; fixed-dof rows carry `d_i` as in the single-patch
    /// assembly.
    pub fn residual(&self, d: &[f64]) -> Result<Vec<f64>> {
        self.check_d(d)?;
        let offsets = self.dof_offsets();
        let fixed = self.fixed_mask();
        let mut r = vec![0.0; self.ndof()];
        for (p, patch) in self.model.patches.iter().enumerate() {
            let rp = patch.residual(&d[offsets[p]..offsets[p + 1]])?;
            r[offsets[p]..offsets[p + 1]].copy_from_slice(&rp);
        }
        for mesh in &self.meshes {
            let (sa, sb, da, db) = self.mesh_context(mesh, d, &offsets);
            let grads = try_map(&mesh.elements, |el| {
                element_energy::<Grad>(el, sa, sb, da, db, &mesh.params, SeedMode::Disp)
            })?;
            for (el, g) in mesh.elements.iter().zip(&grads) {
                let dims = element_dims(el, SeedMode::Disp);
                for li in 0..dims.base {
                    let gi = global_dof(mesh, el, &offsets, li, &dims);
                    if !fixed[gi] {
                        r[gi] += g.g.get(li).copied().unwrap_or(0.0);
                    }
                }
            }
        }
        Ok(r)
    }

    /// Residual and tangent for the Newton loop (no shape partials).
    pub fn residual_and_stiffness(&self, d: &[f64]) -> Result<(Vec<f64>, CscMatrix)> {
        self.check_d(d)?;
        let n = self.ndof();
        let offsets = self.dof_offsets();
        let fixed = self.fixed_mask();
        let mut r = vec![0.0; n];
        let mut k_trip = Triplets::new(n, n);
        for (p, patch) in self.model.patches.iter().enumerate() {
            let (rp, kp) = patch.residual_and_stiffness(&d[offsets[p]..offsets[p + 1]])?;
            r[offsets[p]..offsets[p + 1]].copy_from_slice(&rp);
            offset_into(&mut k_trip, &kp, offsets[p], offsets[p]);
        }
        for mesh in &self.meshes {
            let (sa, sb, da, db) = self.mesh_context(mesh, d, &offsets);
            let parts = try_map(&mesh.elements, |el| {
                element_energy::<Hess>(el, sa, sb, da, db, &mesh.params, SeedMode::Disp)
            })?;
            for (el, w) in mesh.elements.iter().zip(&parts) {
                scatter_element(
                    mesh,
                    el,
                    w,
                    SeedMode::Disp,
                    &offsets,
                    &fixed,
                    Some(&mut r),
                    Some(&mut k_trip),
                    None,
                );
            }
        }
        Ok((r, k_trip.into_csc()))
    }

    /// Full assembly: energies, residual, stiffness, `∂R/∂P`, and
    /// `∂R/∂ξ̃` for every differentiable intersection.
    pub fn assemble(&self, d: &[f64]) -> Result<NonMatchingAssembly> {
        self.check_d(d)?;
        let n = self.ndof();
        let offsets = self.dof_offsets();
        let fixed = self.fixed_mask();
        let mut internal_energy = 0.0;
        let mut external_work = 0.0;
        let mut r = vec![0.0; n];
        let mut k_trip = Triplets::new(n, n);
        let mut cp_trip = Triplets::new(n, n);
        for (p, patch) in self.model.patches.iter().enumerate() {
            let part = patch.assemble_full(&d[offsets[p]..offsets[p + 1]])?;
            internal_energy += part.internal_energy;
            external_work += part.external_work;
            r[offsets[p]..offsets[p + 1]].copy_from_slice(&part.residual);
            offset_into(&mut k_trip, &part.stiffness, offsets[p], offsets[p]);
            offset_into(&mut cp_trip, &part.cp_jacobian, offsets[p], offsets[p]);
        }

        let mut penalty = 0.0;
        for mesh in &self.meshes {
            let (sa, sb, da, db) = self.mesh_context(mesh, d, &offsets);
            let parts = try_map(&mesh.elements, |el| {
                element_energy::<Hess>(el, sa, sb, da, db, &mesh.params, SeedMode::DispCp)
            })?;
            for (el, w) in mesh.elements.iter().zip(&parts) {
                penalty += w.v;
                scatter_element(
                    mesh,
                    el,
                    w,
                    SeedMode::DispCp,
                    &offsets,
                    &fixed,
                    Some(&mut r),
                    Some(&mut k_trip),
                    Some(&mut cp_trip),
                );
            }
        }

        let mut xi_jacobians = Vec::with_capacity(self.meshes.len());
        for (i, mesh) in self.meshes.iter().enumerate() {
            let kind = self.model.intersections[mesh.intersection].kind;
            if kind == IntersectionKind::Differentiable {
                xi_jacobians.push(Some(self.d_residual_d_xi(d, i)?));
            } else {
                xi_jacobians.push(None);
            }
        }

        Ok(NonMatchingAssembly {
            dof_offsets: offsets,
            internal_energy,
            external_work,
            penalty_energy: penalty,
            residual: r,
            stiffness: k_trip.into_csc(),
            cp_jacobian: cp_trip.into_csc(),
            xi_jacobians,
        })
    }

    /// `∂R/∂P` alone (global control-point dof columns).
    pub fn d_residual_d_cp(&self, d: &[f64]) -> Result<CscMatrix> {
        self.check_d(d)?;
        let n = self.ndof();
        let offsets = self.dof_offsets();
        let fixed = self.fixed_mask();
        let mut cp_trip = Triplets::new(n, n);
        for (p, patch) in self.model.patches.iter().enumerate() {
            let jac = patch.d_residual_d_cp(&d[offsets[p]..offsets[p + 1]])?;
            offset_into(&mut cp_trip, &jac, offsets[p], offsets[p]);
        }
        for mesh in &self.meshes {
            let (sa, sb, da, db) = self.mesh_context(mesh, d, &offsets);
            let parts = try_map(&mesh.elements, |el| {
                element_energy::<Hess>(el, sa, sb, da, db, &mesh.params, SeedMode::DispCp)
            })?;
            for (el, w) in mesh.elements.iter().zip(&parts) {
                scatter_element(
                    mesh,
                    el,
                    w,
                    SeedMode::DispCp,
                    &offsets,
                    &fixed,
                    None,
                    None,
                    Some(&mut cp_trip),
                );
            }
        }
        Ok(cp_trip.into_csc())
    }

    /// `∂R/∂ξ̃` of one quadrature mesh: motion of the sample points,
    /// tangents and chord weights all enter through the cached tables'
    /// Taylor shift. Columns follow the mesh's `4m` node-coordinate
    /// layout.
    pub fn d_residual_d_xi(&self, d: &[f64], mesh_index: usize) -> Result<CscMatrix> {
        self.check_d(d)?;
        let mesh = self.meshes.get(mesh_index).ok_or_else(|| {
            Error::InvalidGeometry(format!("quadrature mesh index {mesh_index} out of range"))
        })?;
        let offsets = self.dof_offsets();
        let fixed = self.fixed_mask();
        let mut trip = Triplets::new(self.ndof(), 4 * mesh.num_nodes());
        let (sa, sb, da, db) = self.mesh_context(mesh, d, &offsets);
        let parts = try_map(&mesh.elements, |el| {
            element_energy::<Hess>(el, sa, sb, da, db, &mesh.params, SeedMode::DispXi)
        })?;
        for (el, w) in mesh.elements.iter().zip(&parts) {
            scatter_element(
                mesh,
                el,
                w,
                SeedMode::DispXi,
                &offsets,
                &fixed,
                None,
                None,
                Some(&mut trip),
            );
        }
        Ok(trip.into_csc())
    }

    /// Newton solve of the coupled equilibrium.
    pub fn solve(&self, d0: Vec<f64>, settings: &NewtonSettings) -> Result<NewtonReport> {
        newton_solve(&mut CoupledSystem(self), d0, settings)
    }

    fn mesh_context<'a>(
        &'a self,
        mesh: &QuadratureMesh,
        d: &'a [f64],
        offsets: &[usize],
    ) -> (
        &'a crate::splines::NurbsSurface,
        &'a crate::splines::NurbsSurface,
        &'a [f64],
        &'a [f64],
    ) {
        (
            self.model.patches[mesh.patch_a].surface(),
            self.model.patches[mesh.patch_b].surface(),
            &d[offsets[mesh.patch_a]..offsets[mesh.patch_a + 1]],
            &d[offsets[mesh.patch_b]..offsets[mesh.patch_b + 1]],
        )
    }
}

/// Adapter exposing the coupled model as a nonlinear system.
pub struct CoupledSystem<'a>(pub &'a CoupledModel);

impl NonlinearSystem for CoupledSystem<'_> {
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
        self.0.potential(d).map(Some)
    }
}

/// Push every entry of `m` into `trip`, offset by `(row_off, col_off)`.
fn offset_into(trip: &mut Triplets, m: &CscMatrix, row_off: usize, col_off: usize) {
    for j in 0..m.ncols() {
        let (rows, vals) = m.col(j);
        for (&i, &v) in rows.iter().zip(vals) {
            trip.push(row_off + i, col_off + j, v);
        }
    }
}

/// Global displacement dof behind an element seed slot.
fn global_dof(
    mesh: &QuadratureMesh,
    el: &PenaltyElement,
    offsets: &[usize],
    slot: usize,
    dims: &kernel::ElementDims,
) -> usize {
    let (is_b, idx, c) = split_slot(dims, slot);
    if is_b {
        offsets[mesh.patch_b] + 3 * el.support_b[idx] + c
    } else {
        offsets[mesh.patch_a] + 3 * el.support_a[idx] + c
    }
}

/// Scatter one element's packed Hessian into the global blocks: residual
/// and stiffness (displacement rows/columns), plus either the
/// control-point block (`DispCp`) or the parametric block (`DispXi`) into
/// `extra`. Fixed rows are skipped; the stiffness also skips fixed
/// columns, mirroring the per-patch elimination.
#[allow(clippy::too_many_arguments)]
fn scatter_element(
    mesh: &QuadratureMesh,
    el: &PenaltyElement,
    w: &Hess,
    mode: SeedMode,
    offsets: &[usize],
    fixed: &[bool],
    mut r: Option<&mut Vec<f64>>,
    mut k_trip: Option<&mut Triplets>,
    mut extra: Option<&mut Triplets>,
) {
    let dims = element_dims(el, mode);
    let h = |i: usize, j: usize| w.h.get(tri(i.max(j), i.min(j))).copied().unwrap_or(0.0);
    for li in 0..dims.base {
        let gi = global_dof(mesh, el, offsets, li, &dims);
        if fixed[gi] {
            continue;
        }
        if let Some(r) = r.as_mut() {
            r[gi] += w.g.get(li).copied().unwrap_or(0.0);
        }
        if let Some(k_trip) = k_trip.as_mut() {
            for lj in 0..dims.base {
                let gj = global_dof(mesh, el, offsets, lj, &dims);
                if !fixed[gj] {
                    k_trip.push(gi, gj, h(li, lj));
                }
            }
        }
        if let Some(extra) = extra.as_mut() {
            match mode {
                SeedMode::Disp => {}
                SeedMode::DispCp => {
                    // Geometry slots mirror the displacement layout, and
                    // control-point columns coincide with displacement
                    // columns globally.
                    for lj in 0..dims.base {
                        let gj = global_dof(mesh, el, offsets, lj, &dims);
                        extra.push(gi, gj, h(dims.base + lj, li));
                    }
                }
                SeedMode::DispXi => {
                    for c8 in 0..8 {
                        let col = 4 * (el.k + c8 / 4) + (c8 % 4);
                        extra.push(gi, col, h(dims.base + c8, li));
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shell::{ClampOrder, LoadCase, Material, PatchEdge, ShellPatch};
    use crate::splines::NurbsSurface;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn biquadratic(corners: [[f64; 3]; 4], nel: (usize, usize)) -> NurbsSurface {
        let s = NurbsSurface::bilinear(corners[0], corners[1], corners[2], corners[3]);
        let s = crate::splines::elevate_degree(&s, 1, 1).unwrap().surface;
        let ku: Vec<f64> = (1..nel.0).map(|i| i as f64 / nel.0 as f64).collect();
        let kv: Vec<f64> = (1..nel.1).map(|i| i as f64 / nel.1 as f64).collect();
        crate::splines::refine_knots(&s, &ku, &kv).unwrap().surface
    }

    fn patch(corners: [[f64; 3]; 4], nel: (usize, usize)) -> ShellPatch {
        ShellPatch::new(
            biquadratic(corners, nel),
            0.05,
            Material::new(1e9, 0.3).unwrap(),
        )
        .unwrap()
    }

    /// Two flat plates sharing the x = 1 edge.
    fn shared_edge_model() -> CoupledModel {
        let left = patch(
            [
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [1.0, 1.0, 0.0],
            ],
            (2, 2),
        );
        let right = patch(
            [
                [1.0, 0.0, 0.0],
                [2.0, 0.0, 0.0],
                [1.0, 1.0, 0.0],
                [2.0, 1.0, 0.0],
            ],
            (2, 2),
        );
        let mut model = MultiPatchModel::new(vec![left, right]);
        model.detect_intersections(24).unwrap();
        assert_eq!(model.intersections.len(), 1);
        CoupledModel::new(model, 1e3).unwrap()
    }

    /// Horizontal plate crossed transversally by a vertical one.
    fn crossing_model(warp_seed: Option<u64>) -> CoupledModel {
        let mut horizontal = patch(
            [
                [0.0, 0.0, 0.0],
                [2.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [2.0, 1.0, 0.0],
            ],
            (2, 1),
        );
        let mut vertical = patch(
            [
                [1.0, 0.0, -0.5],
                [1.0, 1.0, -0.5],
                [1.0, 0.0, 0.5],
                [1.0, 1.0, 0.5],
            ],
            (1, 1),
        );
        if let Some(seed) = warp_seed {
            let mut rng = StdRng::seed_from_u64(seed);
            for p in [&mut horizontal, &mut vertical] {
                let cps: Vec<[f64; 3]> = p
                    .surface()
                    .control_points()
                    .iter()
                    .map(|q| {
                        let mut q = *q;
                        for c in q.iter_mut() {
                            *c += 0.02 * (rng.gen::<f64>() - 0.5);
                        }
                        q
                    })
                    .collect();
                p.set_control_points(cps).unwrap();
            }
        }
        let mut model = MultiPatchModel::new(vec![horizontal, vertical]);
        model.detect_intersections(32).unwrap();
        assert_eq!(model.intersections.len(), 1);
        assert_eq!(
            model.intersections[0].kind,
            IntersectionKind::Differentiable
        );
        CoupledModel::new(model, 1e3).unwrap()
    }

    fn random_d(n: usize, scale: f64, seed: u64) -> Vec<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
    }

    #[test]
    fn single_patch_reduces_to_shell_assembly() {
        let mut p = patch(
            [
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [1.0, 1.0, 0.0],
            ],
            (2, 2),
        );
        p.add_load(LoadCase::Dead {
            force_per_area: [0.0, 0.0, -50.0],
        })
        .unwrap();
        p.fix_edge(PatchEdge::UMin, &[0, 1, 2], ClampOrder::Clamped);
        let reference = p.clone();
        let coupled = CoupledModel::new(MultiPatchModel::new(vec![p]), 1e3).unwrap();
        assert!(coupled.meshes.is_empty());

        let d = random_d(coupled.ndof(), 1e-3, 7);
        let full = coupled.assemble(&d).unwrap();
        let single = reference.assemble_full(&d).unwrap();
        assert_eq!(full.residual, single.residual);
        assert_eq!(
            full.stiffness.to_dense(),
            single.stiffness.to_dense()
        );
        assert_eq!(
            full.cp_jacobian.to_dense(),
            single.cp_jacobian.to_dense()
        );
        assert_eq!(full.penalty_energy, 0.0);
    }

    #[test]
    fn coupled_stiffness_matches_fd_of_residual() {
        let coupled = shared_edge_model();
        let n = coupled.ndof();
        let d = random_d(n, 5e-4, 3);
        let (r0, k) = coupled.residual_and_stiffness(&d).unwrap();
        assert!(k.asymmetry() <= 1e-10 * k.norm());
        let dense = k.to_dense();
        let h = 1e-6;
        for col in 0..n {
            let mut dp = d.clone();
            let mut dm = d.clone();
            dp[col] += h;
            dm[col] -= h;
            let rp = coupled.residual(&dp).unwrap();
            let rm = coupled.residual(&dm).unwrap();
            for row in 0..n {
                let fd = (rp[row] - rm[row]) / (2.0 * h);
                let v = dense[(row, col)];
                let scale = v.abs().max(r0[row].abs().max(1.0));
                assert!(
                    (v - fd).abs() <= 1e-5 * scale,
                    "K({row},{col}) = {v} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn cp_jacobian_matches_fd_on_randomized_models() {
        let instances: [(CoupledModel, u64); 3] = [
            (shared_edge_model(), 5),
            (crossing_model(Some(17)), 17),
            (crossing_model(Some(92)), 92),
        ];
        for (coupled, seed) in instances {
            let n = coupled.ndof();
            let d = random_d(n, 5e-4, seed);
            let jac = coupled.d_residual_d_cp(&d).unwrap().to_dense();
            let offsets = coupled.dof_offsets();
            let h = 1e-6;
            let mut rng = StdRng::seed_from_u64(seed ^ 0xabcd);
            for _ in 0..10 {
                let col = rng.gen_range(0..n);
                let patch_idx = if col < offsets[1] { 0 } else { 1 };
                let local = col - offsets[patch_idx];
                let perturbed = |s: f64| -> CoupledModel {
                    let mut m = coupled.clone();
                    let mut cps = m.model.patches[patch_idx]
                        .surface()
                        .control_points()
                        .to_vec();
                    cps[local / 3][local % 3] += s;
                    m.set_control_points(patch_idx, cps).unwrap();
                    m
                };
                let rp = perturbed(h).residual(&d).unwrap();
                let rm = perturbed(-h).residual(&d).unwrap();
                let col_scale = (0..n)
                    .map(|row| jac[(row, col)].abs())
                    .fold(1.0f64, f64::max);
                for row in 0..n {
                    let fd = (rp[row] - rm[row]) / (2.0 * h);
                    let v = jac[(row, col)];
                    assert!(
                        (v - fd).abs() <= 1e-5 * col_scale.max(v.abs()),
                        "seed {seed} dR/dP({row},{col}) = {v} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn xi_jacobian_matches_fd_through_mesh_rebuild() {
        let coupled = crossing_model(Some(13));
        let n = coupled.ndof();
        let d = random_d(n, 5e-4, 21);
        let jac = coupled.d_residual_d_xi(&d, 0).unwrap().to_dense();
        let m = coupled.meshes[0].num_nodes();
        let h = 1e-6;
        for col in 0..4 * m {
            let node = col / 4;
            let coord = col % 4;
            let perturbed = |s: f64| -> Result<Vec<f64>> {
                let mut cm = coupled.clone();
                let mut na = cm.meshes[0].nodes_a.clone();
                let mut nb = cm.meshes[0].nodes_b.clone();
                match coord {
                    0 => na[node].0 += s,
                    1 => na[node].1 += s,
                    2 => nb[node].0 += s,
                    _ => nb[node].1 += s,
                }
                cm.set_intersection_nodes(0, na, nb)?;
                cm.residual(&d)
            };
            let rp = perturbed(h).unwrap();
            let rm = perturbed(-h).unwrap();
            let col_scale = (0..n)
                .map(|row| jac[(row, col)].abs())
                .fold(1.0f64, f64::max);
            for row in 0..n {
                let fd = (rp[row] - rm[row]) / (2.0 * h);
                let v = jac[(row, col)];
                assert!(
                    (v - fd).abs() <= 1e-4 * col_scale.max(v.abs()),
                    "dR/dxi({row},{col}) = {v} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn zero_coefficient_zeroes_penalty_blocks() {
        let mut base = crossing_model(None);
        base.coefficient = 0.0;
        let model = base.model.clone();
        let coupled = CoupledModel::new(model, 0.0).unwrap();
        let d = random_d(coupled.ndof(), 1e-3, 2);
        let jac = coupled.d_residual_d_xi(&d, 0).unwrap();
        assert_eq!(jac.nnz(), 0);
        let (_, _, wp) = coupled.energies(&d).unwrap();
        assert_eq!(wp, 0.0);
    }

    #[test]
    fn xi_jacobian_rows_are_local_to_the_intersecting_patches() {
        // Add a third, far-away patch: its dofs must not appear in ∂R/∂ξ̃.
        let coupled = crossing_model(None);
        let mut patches = coupled.model.patches.clone();
        patches.push(patch(
            [
                [10.0, 0.0, 0.0],
                [11.0, 0.0, 0.0],
                [10.0, 1.0, 0.0],
                [11.0, 1.0, 0.0],
            ],
            (1, 1),
        ));
        let mut model = MultiPatchModel::new(patches);
        model.detect_intersections(32).unwrap();
        assert_eq!(model.intersections.len(), 1);
        let coupled = CoupledModel::new(model, 1e3).unwrap();
        let offsets = coupled.dof_offsets();
        let d = random_d(coupled.ndof(), 1e-3, 4);
        let jac = coupled.d_residual_d_xi(&d, 0).unwrap();
        for col in 0..jac.ncols() {
            let (rows, _) = jac.col(col);
            for &row in rows {
                assert!(
                    row < offsets[2],
                    "row {row} belongs to the detached patch"
                );
            }
        }
        // Energies from the assembly agree with the standalone evaluator.
        let full = coupled.assemble(&d).unwrap();
        let mut wp = 0.0;
        for mesh in &coupled.meshes {
            wp += penalty_energy(mesh, &coupled.model, &d, &mesh.params).unwrap();
        }
        assert_relative_eq!(full.penalty_energy, wp, max_relative = 1e-12);
        assert!(full.xi_jacobians[0].is_some());
    }
}
