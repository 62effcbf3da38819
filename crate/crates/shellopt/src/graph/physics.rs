//! Physics-backed graph components over a shared [`CoupledModel`]:
//! equilibrium displacement, intersection relocation, internal energy and
//! shell volume. All components write the control-point fields they
//! receive into the shared model before touching it, so their outputs and
//! partials are pure functions of the graph variables; the model instance
//! is only a workspace. Orchestration is single-threaded (the model is
//! shared through `Rc<RefCell<…>>`) while assembly inside each component
//! parallelizes over elements.

use super::{
    block_diag_csc, csc_row, dense_to_csc, hstack_csc, select_field_columns, vstack_csc,
    Component, ComponentKind, Partials, VarSpec,
};
use crate::coupling::{pack_nodes, unpack_nodes, CoupledModel, XiSystem};
use crate::geometry::IntersectionKind;
use crate::solver::NewtonSettings;
use crate::{Error, Result};
use std::cell::RefCell;
use std::rc::Rc;

/// The analysis model shared by the physics components of one graph.
pub type SharedModel = Rc<RefCell<CoupledModel>>;

pub fn share(model: CoupledModel) -> SharedModel {
    Rc::new(RefCell::new(model))
}

/// Stacked values of one coordinate field over all patches (patch-major,
/// matching the control-point variable layout).
pub fn field_values(model: &CoupledModel, field: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for patch in &model.model.patches {
        out.extend(patch.surface().control_points().iter().map(|p| p[field]));
    }
    out
}

/// Indices of quadrature meshes whose intersections may move with the
/// design (interior crossings), in mesh order.
pub fn differentiable_meshes(model: &CoupledModel) -> Vec<usize> {
    model
        .meshes
        .iter()
        .enumerate()
        .filter(|(_, mesh)| {
            model.model.intersections[mesh.intersection].kind == IntersectionKind::Differentiable
        })
        .map(|(i, _)| i)
        .collect()
}

/// The optimized coordinate fields of a physics component: which fields
/// vary, the variable name carrying each one, and the frozen baseline
/// control points providing the remaining coordinates.
struct FieldInputs {
    fields: Vec<usize>,
    specs: Vec<VarSpec>,
    base: Vec<Vec<[f64; 3]>>,
}

impl FieldInputs {
    fn new(model: &CoupledModel, fields: &[usize], names: &[&str]) -> Result<Self> {
        if fields.is_empty() || fields.len() != names.len() {
            return Err(Error::Graph(format!(
                "{} optimized fields with {} input names",
                fields.len(),
                names.len()
            )));
        }
        for &f in fields {
            if f > 2 {
                return Err(Error::Graph(format!("coordinate field {f} out of range")));
            }
        }
        let base: Vec<Vec<[f64; 3]>> = model
            .model
            .patches
            .iter()
            .map(|p| p.surface().control_points().to_vec())
            .collect();
        let total: usize = base.iter().map(|b| b.len()).sum();
        Ok(FieldInputs {
            fields: fields.to_vec(),
            specs: names.iter().map(|&n| VarSpec::new(n, total)).collect(),
            base,
        })
    }

    fn len(&self) -> usize {
        self.fields.len()
    }

    /// Overlay the field values onto the baseline and push every patch's
    /// control points into the model.
    fn apply(&self, model: &mut CoupledModel, inputs: &[&[f64]]) -> Result<()> {
        let mut offset = 0;
        for (k, base) in self.base.iter().enumerate() {
            let mut cps = base.clone();
            for (slot, &field) in self.fields.iter().enumerate() {
                let values = inputs[slot];
                for (i, cp) in cps.iter_mut().enumerate() {
                    cp[field] = values[offset + i];
                }
            }
            model.set_control_points(k, cps)?;
            offset += base.len();
        }
        Ok(())
    }
}

/// Bookkeeping for a stacked intersection-node variable.
struct XiLayout {
    meshes: Vec<usize>,
    sizes: Vec<usize>,
}

impl XiLayout {
    fn new(model: &CoupledModel) -> Result<Self> {
        let meshes = differentiable_meshes(model);
        if meshes.is_empty() {
            return Err(Error::Graph(
                "model has no differentiable intersections to relocate".into(),
            ));
        }
        let sizes = meshes
            .iter()
            .map(|&mi| 4 * model.meshes[mi].num_nodes())
            .collect();
        Ok(XiLayout { meshes, sizes })
    }

    fn total(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// Split a stacked vector into per-mesh slices.
    fn split<'a>(&self, x: &'a [f64]) -> Vec<&'a [f64]> {
        let mut out = Vec::with_capacity(self.sizes.len());
        let mut offset = 0;
        for &s in &self.sizes {
            out.push(&x[offset..offset + s]);
            offset += s;
        }
        out
    }

    fn apply(&self, model: &mut CoupledModel, x: &[f64]) -> Result<()> {
        for (&mi, part) in self.meshes.iter().zip(self.split(x)) {
            let (na, nb) = unpack_nodes(part);
            model.set_intersection_nodes(mi, na, nb)?;
        }
        Ok(())
    }
}

/// Implicit equilibrium: control-point fields (and, in moving-intersection
/// mode, the stacked intersection nodes) in, converged displacement out.
/// The state Jacobian is the boundary-eliminated tangent stiffness.
pub struct DispComp {
    name: String,
    model: SharedModel,
    fields: FieldInputs,
    xi: Option<(String, XiLayout)>,
    output: String,
    settings: NewtonSettings,
    warm: Vec<f64>,
    /// Residual norm the first (cold) solve started from. Warm restarts
    /// measure `rel_tol` against this fixed scale — their own initial
    /// residual sits near the converged floor, which would otherwise
    /// demand an unattainable tolerance.
    reference: Option<f64>,
}

impl DispComp {
    pub fn new(
        name: impl Into<String>,
        model: SharedModel,
        fields: &[usize],
        field_inputs: &[&str],
        output: impl Into<String>,
        settings: NewtonSettings,
    ) -> Result<Self> {
        let (fi, ndof) = {
            let m = model.borrow();
            (FieldInputs::new(&m, fields, field_inputs)?, m.ndof())
        };
        Ok(DispComp {
            name: name.into(),
            model,
            fields: fi,
            xi: None,
            output: output.into(),
            settings,
            warm: vec![0.0; ndof],
            reference: None,
        })
    }

    /// Variant with a trailing input carrying the relocated intersection
    /// nodes of every differentiable mesh.
    pub fn with_intersections(
        name: impl Into<String>,
        model: SharedModel,
        fields: &[usize],
        field_inputs: &[&str],
        xi_input: impl Into<String>,
        output: impl Into<String>,
        settings: NewtonSettings,
    ) -> Result<Self> {
        let mut comp = DispComp::new(name, model, fields, field_inputs, output, settings)?;
        let layout = XiLayout::new(&comp.model.borrow())?;
        comp.xi = Some((xi_input.into(), layout));
        Ok(comp)
    }

    fn apply_state(&self, inputs: &[&[f64]]) -> Result<()> {
        let mut m = self.model.borrow_mut();
        self.fields.apply(&mut m, &inputs[..self.fields.len()])?;
        if let Some((_, layout)) = &self.xi {
            layout.apply(&mut m, inputs[self.fields.len()])?;
        }
        Ok(())
    }
}

impl Component for DispComp {
    fn name(&self) -> &str {
        &self.name
    }
    fn kind(&self) -> ComponentKind {
        ComponentKind::Implicit
    }
    fn inputs(&self) -> Vec<VarSpec> {
        let mut specs = self.fields.specs.clone();
        if let Some((name, layout)) = &self.xi {
            specs.push(VarSpec::new(name, layout.total()));
        }
        specs
    }
    fn outputs(&self) -> Vec<VarSpec> {
        vec![VarSpec::new(&self.output, self.warm.len())]
    }
    fn eval(&mut self, inputs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        self.apply_state(inputs)?;
        let mut settings = self.settings;
        if let Some(r0) = self.reference {
            settings.abs_tol = settings.abs_tol.max(settings.rel_tol * r0);
        }
        let report = self.model.borrow().solve(self.warm.clone(), &settings)?;
        if self.reference.is_none() {
            self.reference = Some(report.residual_history[0]);
        }
        self.warm.clone_from(&report.d);
        Ok(vec![report.d])
    }
    fn partials(&mut self, inputs: &[&[f64]], outputs: &[&[f64]]) -> Result<Partials> {
        self.apply_state(inputs)?;
        let asm = self.model.borrow().assemble(outputs[0])?;
        let mut p = Partials::implicit(asm.stiffness);
        for (slot, &field) in self.fields.fields.iter().enumerate() {
            p.push(0, slot, select_field_columns(&asm.cp_jacobian, field));
        }
        if let Some((_, layout)) = &self.xi {
            let blocks: Vec<_> = layout
                .meshes
                .iter()
                .map(|&mi| {
                    asm.xi_jacobians[mi].clone().ok_or_else(|| {
                        Error::Graph(format!(
                            "mesh {mi} has no intersection-node Jacobian"
                        ))
                    })
                })
                .collect::<Result<_>>()?;
            p.push(0, self.fields.len(), hstack_csc(&blocks));
        }
        Ok(p)
    }
}

/// Implicit relocation of the differentiable intersections: for each mesh
/// the state solves the intersection residual (points on both surfaces
/// coincide, arc-length spacing, pinned ends) at the current control
/// points. The solved nodes are written back into the shared model.
pub struct CpIga2XiComp {
    name: String,
    model: SharedModel,
    fields: FieldInputs,
    layout: XiLayout,
    output: String,
}

impl CpIga2XiComp {
    pub fn new(
        name: impl Into<String>,
        model: SharedModel,
        fields: &[usize],
        field_inputs: &[&str],
        output: impl Into<String>,
    ) -> Result<Self> {
        let (fi, layout) = {
            let m = model.borrow();
            (FieldInputs::new(&m, fields, field_inputs)?, XiLayout::new(&m)?)
        };
        Ok(CpIga2XiComp {
            name: name.into(),
            model,
            fields: fi,
            layout,
            output: output.into(),
        })
    }
}

impl Component for CpIga2XiComp {
    fn name(&self) -> &str {
        &self.name
    }
    fn kind(&self) -> ComponentKind {
        ComponentKind::Implicit
    }
    fn inputs(&self) -> Vec<VarSpec> {
        self.fields.specs.clone()
    }
    fn outputs(&self) -> Vec<VarSpec> {
        vec![VarSpec::new(&self.output, self.layout.total())]
    }
    fn eval(&mut self, inputs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let mut m = self.model.borrow_mut();
        self.fields.apply(&mut m, inputs)?;
        let mut out = Vec::with_capacity(self.layout.total());
        for &mi in &self.layout.meshes {
            // Warm-start from the mesh's current trace.
            let x0 = pack_nodes(&m.meshes[mi].nodes_a, &m.meshes[mi].nodes_b);
            let sys = XiSystem::new(&m.model, &m.meshes[mi])?;
            let x = sys.solve(&m.model, &x0)?;
            let (na, nb) = unpack_nodes(&x);
            m.set_intersection_nodes(mi, na, nb)?;
            out.extend(x);
        }
        Ok(vec![out])
    }
    fn partials(&mut self, inputs: &[&[f64]], outputs: &[&[f64]]) -> Result<Partials> {
        let mut m = self.model.borrow_mut();
        self.fields.apply(&mut m, inputs)?;
        self.layout.apply(&mut m, outputs[0])?;
        let mut state_blocks = Vec::new();
        let mut cp_blocks = Vec::new();
        for (&mi, x) in self.layout.meshes.iter().zip(self.layout.split(outputs[0])) {
            let sys = XiSystem::new(&m.model, &m.meshes[mi])?;
            state_blocks.push(dense_to_csc(&sys.jacobian_xi(&m.model, x)?));
            cp_blocks.push(sys.jacobian_cp(&m.model, x)?);
        }
        let mut p = Partials::implicit(block_diag_csc(&state_blocks));
        for (slot, &field) in self.fields.fields.iter().enumerate() {
            let per_mesh: Vec<_> = cp_blocks
                .iter()
                .map(|b| select_field_columns(b, field))
                .collect();
            p.push(0, slot, vstack_csc(&per_mesh));
        }
        Ok(p)
    }
}

/// Total internal (strain) energy of all patches at the solved state —
/// the shape-optimization objective. Interface penalty terms are a
/// numerical coupling device and are not part of the stored energy.
pub struct IntEnergyComp {
    name: String,
    model: SharedModel,
    fields: FieldInputs,
    disp_input: String,
    output: String,
}

impl IntEnergyComp {
    pub fn new(
        name: impl Into<String>,
        model: SharedModel,
        fields: &[usize],
        field_inputs: &[&str],
        disp_input: impl Into<String>,
        output: impl Into<String>,
    ) -> Result<Self> {
        let fi = FieldInputs::new(&model.borrow(), fields, field_inputs)?;
        Ok(IntEnergyComp {
            name: name.into(),
            model,
            fields: fi,
            disp_input: disp_input.into(),
            output: output.into(),
        })
    }
}

impl Component for IntEnergyComp {
    fn name(&self) -> &str {
        &self.name
    }
    fn inputs(&self) -> Vec<VarSpec> {
        let mut specs = self.fields.specs.clone();
        specs.push(VarSpec::new(&self.disp_input, self.model.borrow().ndof()));
        specs
    }
    fn outputs(&self) -> Vec<VarSpec> {
        vec![VarSpec::new(&self.output, 1)]
    }
    fn eval(&mut self, inputs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let mut m = self.model.borrow_mut();
        self.fields.apply(&mut m, &inputs[..self.fields.len()])?;
        let (w_int, _, _) = m.energies(inputs[self.fields.len()])?;
        Ok(vec![vec![w_int]])
    }
    fn partials(&mut self, inputs: &[&[f64]], _: &[&[f64]]) -> Result<Partials> {
        let mut m = self.model.borrow_mut();
        self.fields.apply(&mut m, &inputs[..self.fields.len()])?;
        let d = inputs[self.fields.len()];
        let offsets = m.dof_offsets();
        let n = m.ndof();
        let mut grad_d = vec![0.0; n];
        let mut grad_p = vec![0.0; n];
        for (k, patch) in m.model.patches.iter().enumerate() {
            let (_, gd, gp) =
                patch.internal_energy_gradients(&d[offsets[k]..offsets[k + 1]])?;
            grad_d[offsets[k]..offsets[k + 1]].copy_from_slice(&gd);
            grad_p[offsets[k]..offsets[k + 1]].copy_from_slice(&gp);
        }
        let gp_row = csc_row(&grad_p);
        let mut p = Partials::explicit();
        for (slot, &field) in self.fields.fields.iter().enumerate() {
            p.push(0, slot, select_field_columns(&gp_row, field));
        }
        p.push(0, self.fields.len(), csc_row(&grad_d));
        Ok(p)
    }
}

/// Material volume `Σ t_k ∫ ‖a₁ × a₂‖ dξ` of selected patches in the
/// reference configuration (explicit, scalar output) — the usual
/// shape-optimization constraint keeping material constant.
pub struct VolumeComp {
    name: String,
    model: SharedModel,
    fields: FieldInputs,
    patches: Vec<usize>,
    output: String,
}

impl VolumeComp {
    /// `patches = None` integrates over every patch.
    pub fn new(
        name: impl Into<String>,
        model: SharedModel,
        fields: &[usize],
        field_inputs: &[&str],
        patches: Option<Vec<usize>>,
        output: impl Into<String>,
    ) -> Result<Self> {
        let (fi, npatches) = {
            let m = model.borrow();
            (
                FieldInputs::new(&m, fields, field_inputs)?,
                m.model.patches.len(),
            )
        };
        let patches = patches.unwrap_or_else(|| (0..npatches).collect());
        for &k in &patches {
            if k >= npatches {
                return Err(Error::Graph(format!("patch index {k} out of range")));
            }
        }
        Ok(VolumeComp {
            name: name.into(),
            model,
            fields: fi,
            patches,
            output: output.into(),
        })
    }
}

impl Component for VolumeComp {
    fn name(&self) -> &str {
        &self.name
    }
    fn inputs(&self) -> Vec<VarSpec> {
        self.fields.specs.clone()
    }
    fn outputs(&self) -> Vec<VarSpec> {
        vec![VarSpec::new(&self.output, 1)]
    }
    fn eval(&mut self, inputs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let mut m = self.model.borrow_mut();
        self.fields.apply(&mut m, inputs)?;
        let mut v = 0.0;
        for &k in &self.patches {
            v += m.model.patches[k].volume()?;
        }
        Ok(vec![vec![v]])
    }
    fn partials(&mut self, inputs: &[&[f64]], _: &[&[f64]]) -> Result<Partials> {
        let mut m = self.model.borrow_mut();
        self.fields.apply(&mut m, inputs)?;
        let offsets = m.dof_offsets();
        let mut grad = vec![0.0; m.ndof()];
        for &k in &self.patches {
            let (_, g) = m.model.patches[k].volume_and_gradient()?;
            grad[offsets[k]..offsets[k + 1]].copy_from_slice(&g);
        }
        let row = csc_row(&grad);
        let mut p = Partials::explicit();
        for (slot, &field) in self.fields.fields.iter().enumerate() {
            p.push(0, slot, select_field_columns(&row, field));
        }
        Ok(p)
    }
}
