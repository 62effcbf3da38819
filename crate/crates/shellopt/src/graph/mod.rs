//! Component graph for coupled sensitivity analysis.
//!
//! An optimization model is wired together from *components* exchanging
//! named, flat real vectors. Explicit components compute `y = F(x)`;
//! implicit ones define a residual `R(x, y) = 0` whose state `y` is found
//! by the component's own inner solver. Given the sparse partial
//! derivatives of every component, the graph computes exact total
//! derivatives of any output with respect to the design variables either
//! by the adjoint (reverse) method — one linear transpose solve per seeded
//! output component — or by the direct (forward) method, which chains
//! tangents and costs one solve per design dof. Both walk the same
//! partials, so they agree to roundoff, and the adjoint never re-runs an
//! inner solver: implicit states stay frozen at the forward solution.

pub mod components;
pub mod physics;

pub use components::{
    eliminate_ties, Fe2IgaComp, FieldReduction, LinearComp, RegularizationComp,
};
pub use physics::{
    differentiable_meshes, field_values, share, CpIga2XiComp, DispComp, IntEnergyComp,
    SharedModel, VolumeComp,
};

use crate::solver::{CscMatrix, SparseLu, Triplets};
use crate::{Error, Result};
use nalgebra::DMatrix;
use std::collections::BTreeMap;

/// A named, sized, flat real vector exchanged between components.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarSpec {
    pub name: String,
    pub size: usize,
}

impl VarSpec {
    pub fn new(name: impl Into<String>, size: usize) -> Self {
        VarSpec {
            name: name.into(),
            size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComponentKind {
    /// Outputs are computed directly from the inputs.
    Explicit,
    /// The single output is a state `y` solving `R(x, y) = 0`.
    Implicit,
}

/// Sparse partial derivatives of one component at its last evaluated point.
///
/// Explicit components store `∂y_i/∂x_j` under the key `(i, j)` (output
/// slot, input slot). Implicit ones store residual partials instead:
/// `wrt_state` is the square `∂R/∂y` and the block `(0, j)` is `∂R/∂x_j`.
#[derive(Debug, Default)]
pub struct Partials {
    pub blocks: BTreeMap<(usize, usize), CscMatrix>,
    pub wrt_state: Option<CscMatrix>,
}

impl Partials {
    pub fn explicit() -> Self {
        Partials::default()
    }

    pub fn implicit(wrt_state: CscMatrix) -> Self {
        Partials {
            blocks: BTreeMap::new(),
            wrt_state: Some(wrt_state),
        }
    }

    pub fn push(&mut self, output: usize, input: usize, block: CscMatrix) {
        self.blocks.insert((output, input), block);
    }
}

/// One node of the graph.
///
/// `eval` receives input values in the order declared by `inputs()` and
/// returns one vector per declared output. For implicit components `eval`
/// runs the inner solver and returns the converged state; `partials` is
/// called afterwards with that state and must return residual partials at
/// the *given* arguments (components must not rely on hidden state beyond
/// what the arguments determine).
pub trait Component {
    fn name(&self) -> &str;
    fn kind(&self) -> ComponentKind {
        ComponentKind::Explicit
    }
    fn inputs(&self) -> Vec<VarSpec>;
    fn outputs(&self) -> Vec<VarSpec>;
    fn eval(&mut self, inputs: &[&[f64]]) -> Result<Vec<Vec<f64>>>;
    fn partials(&mut self, inputs: &[&[f64]], outputs: &[&[f64]]) -> Result<Partials>;
}

/// A design variable: an otherwise-unconnected component input promoted to
/// an optimization unknown, with elementwise bounds.
#[derive(Debug, Clone)]
pub struct DesignVar {
    pub name: String,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl DesignVar {
    /// Unbounded design variable of the given size.
    pub fn free(name: impl Into<String>, size: usize) -> Self {
        DesignVar {
            name: name.into(),
            lower: vec![f64::NEG_INFINITY; size],
            upper: vec![f64::INFINITY; size],
        }
    }

    pub fn size(&self) -> usize {
        self.lower.len()
    }
}

/// A constrained output: `lower ≤ value ≤ upper` elementwise, an equality
/// where the two bounds coincide.
#[derive(Debug, Clone)]
pub struct ConstraintSpec {
    pub output: String,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ConstraintSpec {
    pub fn equality(output: impl Into<String>, value: Vec<f64>) -> Self {
        ConstraintSpec {
            output: output.into(),
            lower: value.clone(),
            upper: value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Origin {
    Design(usize),
    Output { comp: usize, slot: usize },
}

#[derive(Debug, Clone)]
struct VarEntry {
    name: String,
    size: usize,
    origin: Origin,
}

/// Resolved wiring: variable table, per-component input sources and a
/// topological evaluation order.
struct Plan {
    vars: Vec<VarEntry>,
    by_name: BTreeMap<String, usize>,
    /// Input variable ids per component, in declaration order.
    inputs: Vec<Vec<usize>>,
    /// Output variable ids per component, in declaration order.
    outputs: Vec<Vec<usize>>,
    topo: Vec<usize>,
}

/// Cached derivative state at the last forward evaluation.
struct Derivs {
    comp: Vec<Partials>,
    /// LU factors of `∂R/∂y` for implicit components.
    factors: Vec<Option<SparseLu>>,
}

struct State {
    values: Vec<Vec<f64>>,
    derivs: Option<Derivs>,
}

/// Total-derivative blocks, one dense `(output size × design size)` matrix
/// per requested output and design variable.
#[derive(Debug)]
pub struct Totals {
    pub blocks: BTreeMap<String, BTreeMap<String, DMatrix<f64>>>,
    design_order: Vec<String>,
}

impl Totals {
    pub fn block(&self, output: &str, design: &str) -> Option<&DMatrix<f64>> {
        self.blocks.get(output).and_then(|m| m.get(design))
    }

    /// Concatenated first row over all design variables in declaration
    /// order — the gradient of a scalar output.
    pub fn gradient(&self, output: &str) -> Option<Vec<f64>> {
        let per_design = self.blocks.get(output)?;
        let mut g = Vec::new();
        for name in &self.design_order {
            let b = per_design.get(name)?;
            g.extend(b.row(0).iter().copied());
        }
        Some(g)
    }
}

/// Directed acyclic network of components, design variables, an objective
/// and constraints.
#[derive(Default)]
pub struct ComponentGraph {
    components: Vec<Box<dyn Component>>,
    /// Explicit rewiring `(component, input) → output/design name`,
    /// overriding connection by name equality.
    overrides: BTreeMap<(String, String), String>,
    design: Vec<DesignVar>,
    objective: Option<String>,
    constraints: Vec<ConstraintSpec>,
    plan: Option<Plan>,
    state: Option<State>,
}

fn wrap(name: &str, err: Error) -> Error {
    Error::Graph(format!("component '{name}': {err}"))
}

impl ComponentGraph {
    pub fn new() -> Self {
        ComponentGraph::default()
    }

    pub fn add_component(&mut self, component: Box<dyn Component>) -> usize {
        self.plan = None;
        self.state = None;
        self.components.push(component);
        self.components.len() - 1
    }

    /// Route a named output (or design variable) into a specific component
    /// input, overriding connection by name equality.
    pub fn connect(&mut self, source: &str, component: &str, input: &str) {
        self.plan = None;
        self.state = None;
        self.overrides
            .insert((component.into(), input.into()), source.into());
    }

    pub fn add_design_var(&mut self, var: DesignVar) {
        self.plan = None;
        self.state = None;
        self.design.push(var);
    }

    pub fn set_objective(&mut self, output: impl Into<String>) {
        self.objective = Some(output.into());
    }

    pub fn add_constraint(&mut self, c: ConstraintSpec) {
        self.constraints.push(c);
    }

    pub fn design_vars(&self) -> &[DesignVar] {
        &self.design
    }

    pub fn objective(&self) -> Option<&str> {
        self.objective.as_deref()
    }

    pub fn constraints(&self) -> &[ConstraintSpec] {
        &self.constraints
    }

    /// Validate the wiring and freeze the evaluation order. Called
    /// implicitly by the first evaluation; explicit calls surface errors
    /// early.
    pub fn finalize(&mut self) -> Result<()> {
        if self.plan.is_some() {
            return Ok(());
        }

        let mut vars: Vec<VarEntry> = Vec::new();
        let mut by_name: BTreeMap<String, usize> = BTreeMap::new();
        let add_var = |entry: VarEntry, by_name: &mut BTreeMap<String, usize>,
                           vars: &mut Vec<VarEntry>|
         -> Result<()> {
            if entry.size == 0 {
                return Err(Error::Graph(format!(
                    "variable '{}' has size zero",
                    entry.name
                )));
            }
            if by_name.insert(entry.name.clone(), vars.len()).is_some() {
                return Err(Error::Graph(format!(
                    "duplicate variable name '{}'",
                    entry.name
                )));
            }
            vars.push(entry);
            Ok(())
        };

        for (di, dv) in self.design.iter().enumerate() {
            if dv.lower.len() != dv.upper.len() {
                return Err(Error::Graph(format!(
                    "design variable '{}' has {} lower and {} upper bounds",
                    dv.name,
                    dv.lower.len(),
                    dv.upper.len()
                )));
            }
            add_var(
                VarEntry {
                    name: dv.name.clone(),
                    size: dv.size(),
                    origin: Origin::Design(di),
                },
                &mut by_name,
                &mut vars,
            )?;
        }

        let mut comp_names: BTreeMap<String, usize> = BTreeMap::new();
        for (c, comp) in self.components.iter().enumerate() {
            if comp_names.insert(comp.name().to_string(), c).is_some() {
                return Err(Error::Graph(format!(
                    "duplicate component name '{}'",
                    comp.name()
                )));
            }
            if comp.kind() == ComponentKind::Implicit && comp.outputs().len() != 1 {
                return Err(Error::Graph(format!(
                    "implicit component '{}' must have exactly one output (the state)",
                    comp.name()
                )));
            }
            for (slot, out) in comp.outputs().into_iter().enumerate() {
                add_var(
                    VarEntry {
                        name: out.name,
                        size: out.size,
                        origin: Origin::Output { comp: c, slot },
                    },
                    &mut by_name,
                    &mut vars,
                )?;
            }
        }

        for ((comp, input), source) in &self.overrides {
            if !comp_names.contains_key(comp) {
                return Err(Error::Graph(format!(
                    "connection targets unknown component '{comp}'"
                )));
            }
            if !by_name.contains_key(source) {
                return Err(Error::Graph(format!(
                    "connection source '{source}' (for '{comp}.{input}') is not a known variable"
                )));
            }
        }

        let mut inputs: Vec<Vec<usize>> = Vec::with_capacity(self.components.len());
        for comp in &self.components {
            let mut resolved = Vec::new();
            for spec in comp.inputs() {
                let key = (comp.name().to_string(), spec.name.clone());
                let source = self.overrides.get(&key).unwrap_or(&spec.name);
                let &var = by_name.get(source).ok_or_else(|| {
                    Error::Graph(format!(
                        "input '{}' of component '{}' is neither connected to an output \
                         nor declared as a design variable",
                        spec.name,
                        comp.name()
                    ))
                })?;
                if vars[var].size != spec.size {
                    return Err(Error::Graph(format!(
                        "input '{}' of component '{}' has size {}, but source '{}' has size {}",
                        spec.name,
                        comp.name(),
                        spec.size,
                        source,
                        vars[var].size
                    )));
                }
                resolved.push(var);
            }
            inputs.push(resolved);
        }

        let outputs: Vec<Vec<usize>> = (0..self.components.len())
            .map(|c| {
                vars.iter()
                    .enumerate()
                    .filter(|(_, v)| matches!(v.origin, Origin::Output { comp, .. } if comp == c))
                    .map(|(id, _)| id)
                    .collect()
            })
            .collect();

        // Kahn's algorithm over component-to-component edges; ready nodes
        // are drained in index order so the schedule is deterministic.
        let n = self.components.len();
        let mut indegree = vec![0usize; n];
        let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (c, resolved) in inputs.iter().enumerate() {
            for &var in resolved {
                if let Origin::Output { comp, .. } = vars[var].origin {
                    indegree[c] += 1;
                    consumers[comp].push(c);
                }
            }
        }
        let mut ready: std::collections::BTreeSet<usize> = (0..n)
            .filter(|&c| indegree[c] == 0)
            .collect();
        let mut topo = Vec::with_capacity(n);
        while let Some(&c) = ready.iter().next() {
            ready.remove(&c);
            topo.push(c);
            for &next in &consumers[c] {
                indegree[next] -= 1;
                if indegree[next] == 0 {
                    ready.insert(next);
                }
            }
        }
        if topo.len() != n {
            let stuck = (0..n).find(|c| !topo.contains(c)).unwrap();
            return Err(Error::Graph(format!(
                "dependency cycle involving component '{}'",
                self.components[stuck].name()
            )));
        }

        if let Some(obj) = &self.objective {
            let &var = by_name
                .get(obj)
                .ok_or_else(|| Error::Graph(format!("objective '{obj}' is not a variable")))?;
            if vars[var].size != 1 {
                return Err(Error::Graph(format!(
                    "objective '{obj}' must be scalar, got size {}",
                    vars[var].size
                )));
            }
        }
        for c in &self.constraints {
            let &var = by_name.get(&c.output).ok_or_else(|| {
                Error::Graph(format!("constraint output '{}' is not a variable", c.output))
            })?;
            if c.lower.len() != vars[var].size || c.upper.len() != vars[var].size {
                return Err(Error::Graph(format!(
                    "constraint on '{}' has {}/{} bounds for size {}",
                    c.output,
                    c.lower.len(),
                    c.upper.len(),
                    vars[var].size
                )));
            }
        }

        self.plan = Some(Plan {
            vars,
            by_name,
            inputs,
            outputs,
            topo,
        });
        Ok(())
    }

    /// Evaluate every component at the given design point (all design
    /// variables must be supplied) and return all variable values.
    pub fn forward_eval(
        &mut self,
        design: &BTreeMap<String, Vec<f64>>,
    ) -> Result<BTreeMap<String, Vec<f64>>> {
        self.finalize()?;
        let plan = self.plan.as_ref().unwrap();

        let mut values: Vec<Vec<f64>> = plan.vars.iter().map(|v| vec![0.0; v.size]).collect();
        for (id, var) in plan.vars.iter().enumerate() {
            if let Origin::Design(_) = var.origin {
                let value = design.get(&var.name).ok_or_else(|| {
                    Error::Graph(format!("no value supplied for design variable '{}'", var.name))
                })?;
                if value.len() != var.size {
                    return Err(Error::Graph(format!(
                        "design variable '{}' has size {}, got {} values",
                        var.name,
                        var.size,
                        value.len()
                    )));
                }
                values[id] = value.clone();
            }
        }

        for &c in &plan.topo {
            let input_vals: Vec<&[f64]> = plan.inputs[c]
                .iter()
                .map(|&v| values[v].as_slice())
                .collect();
            let comp = &mut self.components[c];
            let outs = comp
                .eval(&input_vals)
                .map_err(|e| wrap(comp.name(), e))?;
            if outs.len() != plan.outputs[c].len() {
                return Err(Error::Graph(format!(
                    "component '{}' returned {} outputs, declared {}",
                    comp.name(),
                    outs.len(),
                    plan.outputs[c].len()
                )));
            }
            for (&var, out) in plan.outputs[c].iter().zip(outs) {
                if out.len() != plan.vars[var].size {
                    return Err(Error::Graph(format!(
                        "component '{}' produced {} values for output '{}' of size {}",
                        comp.name(),
                        out.len(),
                        plan.vars[var].name,
                        plan.vars[var].size
                    )));
                }
                values[var] = out;
            }
        }

        self.state = Some(State {
            values,
            derivs: None,
        });
        let plan = self.plan.as_ref().unwrap();
        let state = self.state.as_ref().unwrap();
        Ok(plan
            .vars
            .iter()
            .enumerate()
            .map(|(id, v)| (v.name.clone(), state.values[id].clone()))
            .collect())
    }

    /// Value of a variable at the last forward evaluation.
    pub fn value(&self, name: &str) -> Result<&[f64]> {
        let plan = self
            .plan
            .as_ref()
            .ok_or_else(|| Error::Graph("graph has not been evaluated".into()))?;
        let state = self
            .state
            .as_ref()
            .ok_or_else(|| Error::Graph("graph has not been evaluated".into()))?;
        let &var = plan
            .by_name
            .get(name)
            .ok_or_else(|| Error::Graph(format!("unknown variable '{name}'")))?;
        Ok(&state.values[var])
    }

    /// Assemble and validate every component's partials at the stored
    /// forward solution, factoring implicit state Jacobians.
    fn ensure_partials(&mut self) -> Result<()> {
        if self.state.as_ref().map(|s| s.derivs.is_some()) == Some(true) {
            return Ok(());
        }
        let plan = self
            .plan
            .as_ref()
            .ok_or_else(|| Error::Graph("call forward_eval before requesting derivatives".into()))?;
        let state_values: Vec<Vec<f64>> = match &self.state {
            Some(s) => s.values.clone(),
            None => {
                return Err(Error::Graph(
                    "call forward_eval before requesting derivatives".into(),
                ))
            }
        };

        let mut comp_partials = Vec::with_capacity(self.components.len());
        let mut factors: Vec<Option<SparseLu>> = Vec::with_capacity(self.components.len());
        for c in 0..self.components.len() {
            let input_vals: Vec<&[f64]> = plan.inputs[c]
                .iter()
                .map(|&v| state_values[v].as_slice())
                .collect();
            let output_vals: Vec<&[f64]> = plan.outputs[c]
                .iter()
                .map(|&v| state_values[v].as_slice())
                .collect();
            let comp = &mut self.components[c];
            let name = comp.name().to_string();
            let p = comp
                .partials(&input_vals, &output_vals)
                .map_err(|e| wrap(&name, e))?;

            let in_size = |j: usize| plan.vars[plan.inputs[c][j]].size;
            let out_size = |i: usize| plan.vars[plan.outputs[c][i]].size;
            match comp.kind() {
                ComponentKind::Explicit => {
                    if p.wrt_state.is_some() {
                        return Err(Error::Graph(format!(
                            "explicit component '{name}' returned a state Jacobian"
                        )));
                    }
                    for (&(i, j), block) in &p.blocks {
                        if i >= plan.outputs[c].len() || j >= plan.inputs[c].len() {
                            return Err(Error::Graph(format!(
                                "component '{name}' declared a partial for unknown slot ({i}, {j})"
                            )));
                        }
                        if block.nrows() != out_size(i) || block.ncols() != in_size(j) {
                            return Err(Error::Graph(format!(
                                "component '{name}' partial ({i}, {j}) is {}x{}, expected {}x{}",
                                block.nrows(),
                                block.ncols(),
                                out_size(i),
                                in_size(j)
                            )));
                        }
                    }
                    factors.push(None);
                }
                ComponentKind::Implicit => {
                    let nstate = out_size(0);
                    let jac = p.wrt_state.as_ref().ok_or_else(|| {
                        Error::Graph(format!(
                            "implicit component '{name}' returned no state Jacobian"
                        ))
                    })?;
                    if jac.nrows() != nstate || jac.ncols() != nstate {
                        return Err(Error::Graph(format!(
                            "component '{name}' state Jacobian is {}x{}, state has size {nstate}",
                            jac.nrows(),
                            jac.ncols()
                        )));
                    }
                    for (&(i, j), block) in &p.blocks {
                        if i != 0 || j >= plan.inputs[c].len() {
                            return Err(Error::Graph(format!(
                                "component '{name}' declared a partial for unknown slot ({i}, {j})"
                            )));
                        }
                        if block.nrows() != nstate || block.ncols() != in_size(j) {
                            return Err(Error::Graph(format!(
                                "component '{name}' partial (0, {j}) is {}x{}, expected {}x{}",
                                block.nrows(),
                                block.ncols(),
                                nstate,
                                in_size(j)
                            )));
                        }
                    }
                    let factor = SparseLu::factor(jac).map_err(|e| {
                        Error::Graph(format!(
                            "singular state Jacobian in component '{name}': {e}"
                        ))
                    })?;
                    factors.push(Some(factor));
                }
            }
            comp_partials.push(p);
        }

        self.state.as_mut().unwrap().derivs = Some(Derivs {
            comp: comp_partials,
            factors,
        });
        Ok(())
    }

    fn output_var(&self, name: &str) -> Result<usize> {
        let plan = self.plan.as_ref().unwrap();
        let &var = plan
            .by_name
            .get(name)
            .ok_or_else(|| Error::Graph(format!("unknown variable '{name}'")))?;
        Ok(var)
    }

    /// Total derivatives of the named outputs with respect to every design
    /// variable, by reverse (adjoint) accumulation: one transpose solve per
    /// implicit component and seeded output component.
    pub fn adjoint_total_derivatives(&mut self, outputs: &[&str]) -> Result<Totals> {
        self.ensure_partials()?;
        let out_vars: Vec<usize> = outputs
            .iter()
            .map(|&o| self.output_var(o))
            .collect::<Result<_>>()?;
        let plan = self.plan.as_ref().unwrap();
        let derivs = self.state.as_ref().unwrap().derivs.as_ref().unwrap();

        let mut totals = Totals {
            blocks: BTreeMap::new(),
            design_order: self.design.iter().map(|d| d.name.clone()).collect(),
        };
        for (&oname, &ovar) in outputs.iter().zip(&out_vars) {
            let osize = plan.vars[ovar].size;
            let mut per_design: BTreeMap<String, DMatrix<f64>> = self
                .design
                .iter()
                .map(|d| (d.name.clone(), DMatrix::zeros(osize, d.size())))
                .collect();

            for seed_idx in 0..osize {
                let mut seeds: Vec<Option<Vec<f64>>> = vec![None; plan.vars.len()];
                let mut unit = vec![0.0; osize];
                unit[seed_idx] = 1.0;
                seeds[ovar] = Some(unit);

                for &c in plan.topo.iter().rev() {
                    let p = &derivs.comp[c];
                    match self.components[c].kind() {
                        ComponentKind::Explicit => {
                            for (&(i, j), block) in &p.blocks {
                                let Some(w) = seeds[plan.outputs[c][i]].clone() else {
                                    continue;
                                };
                                let contrib = block.matvec_transpose(&w);
                                accumulate(&mut seeds, plan.inputs[c][j], &contrib, 1.0);
                            }
                        }
                        ComponentKind::Implicit => {
                            let Some(w) = seeds[plan.outputs[c][0]].clone() else {
                                continue;
                            };
                            let lambda =
                                derivs.factors[c].as_ref().unwrap().solve_transpose(&w);
                            for (&(_, j), block) in &p.blocks {
                                let contrib = block.matvec_transpose(&lambda);
                                accumulate(&mut seeds, plan.inputs[c][j], &contrib, -1.0);
                            }
                        }
                    }
                }

                for (id, var) in plan.vars.iter().enumerate() {
                    if let Origin::Design(di) = var.origin {
                        if let Some(s) = &seeds[id] {
                            let block = per_design.get_mut(&self.design[di].name).unwrap();
                            for (col, &v) in s.iter().enumerate() {
                                block[(seed_idx, col)] = v;
                            }
                        }
                    }
                }
            }
            totals.blocks.insert(oname.to_string(), per_design);
        }
        Ok(totals)
    }

    /// Total derivatives by forward (direct) accumulation: tangents are
    /// chained through the graph, one linear solve per implicit component
    /// and design dof. Mathematically identical to the adjoint result.
    pub fn direct_total_derivatives(&mut self, outputs: &[&str]) -> Result<Totals> {
        self.ensure_partials()?;
        let out_vars: Vec<usize> = outputs
            .iter()
            .map(|&o| self.output_var(o))
            .collect::<Result<_>>()?;
        let plan = self.plan.as_ref().unwrap();
        let derivs = self.state.as_ref().unwrap().derivs.as_ref().unwrap();

        let mut totals = Totals {
            blocks: BTreeMap::new(),
            design_order: self.design.iter().map(|d| d.name.clone()).collect(),
        };
        for (&oname, &ovar) in outputs.iter().zip(&out_vars) {
            let osize = plan.vars[ovar].size;
            totals.blocks.insert(
                oname.to_string(),
                self.design
                    .iter()
                    .map(|d| (d.name.clone(), DMatrix::zeros(osize, d.size())))
                    .collect(),
            );
        }

        for (di, dv) in self.design.iter().enumerate() {
            let dvar = plan
                .vars
                .iter()
                .position(|v| v.origin == Origin::Design(di))
                .unwrap();
            for col in 0..dv.size() {
                let mut tangents: Vec<Option<Vec<f64>>> = vec![None; plan.vars.len()];
                let mut unit = vec![0.0; dv.size()];
                unit[col] = 1.0;
                tangents[dvar] = Some(unit);

                for &c in &plan.topo {
                    let p = &derivs.comp[c];
                    match self.components[c].kind() {
                        ComponentKind::Explicit => {
                            for (&(i, j), block) in &p.blocks {
                                let Some(x) = tangents[plan.inputs[c][j]].clone() else {
                                    continue;
                                };
                                let contrib = block.matvec(&x);
                                accumulate(&mut tangents, plan.outputs[c][i], &contrib, 1.0);
                            }
                        }
                        ComponentKind::Implicit => {
                            let nstate = plan.vars[plan.outputs[c][0]].size;
                            let mut rhs = vec![0.0; nstate];
                            let mut hit = false;
                            for (&(_, j), block) in &p.blocks {
                                if let Some(x) = &tangents[plan.inputs[c][j]] {
                                    hit = true;
                                    for (r, v) in block.matvec(x).into_iter().enumerate() {
                                        rhs[r] += v;
                                    }
                                }
                            }
                            if hit {
                                let mut ydot =
                                    derivs.factors[c].as_ref().unwrap().solve(&rhs);
                                for y in &mut ydot {
                                    *y = -*y;
                                }
                                accumulate(&mut tangents, plan.outputs[c][0], &ydot, 1.0);
                            }
                        }
                    }
                }

                for (&oname, &ovar) in outputs.iter().zip(&out_vars) {
                    if let Some(t) = &tangents[ovar] {
                        let block = totals
                            .blocks
                            .get_mut(oname)
                            .unwrap()
                            .get_mut(&dv.name)
                            .unwrap();
                        for (row, &v) in t.iter().enumerate() {
                            block[(row, col)] = v;
                        }
                    }
                }
            }
        }
        Ok(totals)
    }

    /// Transpose-solve count per implicit component (instrumentation for
    /// verifying that the adjoint performs one solve per seeded output).
    pub fn adjoint_solve_counts(&self) -> Vec<(String, usize)> {
        let Some(state) = &self.state else {
            return Vec::new();
        };
        let Some(derivs) = &state.derivs else {
            return Vec::new();
        };
        derivs
            .factors
            .iter()
            .enumerate()
            .filter_map(|(c, f)| {
                f.as_ref()
                    .map(|f| (self.components[c].name().to_string(), f.transpose_solve_count()))
            })
            .collect()
    }
}

fn accumulate(seeds: &mut [Option<Vec<f64>>], var: usize, contrib: &[f64], sign: f64) {
    match &mut seeds[var] {
        Some(s) => {
            for (si, &ci) in s.iter_mut().zip(contrib) {
                *si += sign * ci;
            }
        }
        None => {
            seeds[var] = Some(contrib.iter().map(|&c| sign * c).collect());
        }
    }
}

// ---------------------------------------------------------------------------
// Sparse-block helpers shared by the built-in components.
// ---------------------------------------------------------------------------

/// Copy with every entry multiplied by `s`.
pub(crate) fn scale_csc(m: &CscMatrix, s: f64) -> CscMatrix {
    let mut t = Triplets::new(m.nrows(), m.ncols());
    for j in 0..m.ncols() {
        let (rows, vals) = m.col(j);
        for (&r, &v) in rows.iter().zip(vals) {
            t.push(r, j, s * v);
        }
    }
    t.into_csc()
}

/// Restrict to the columns of one interleaved coordinate field: column `c`
/// survives when `c % 3 == field` and becomes column `c / 3`.
pub(crate) fn select_field_columns(m: &CscMatrix, field: usize) -> CscMatrix {
    debug_assert!(m.ncols() % 3 == 0 && field < 3);
    let mut t = Triplets::new(m.nrows(), m.ncols() / 3);
    for j in (field..m.ncols()).step_by(3) {
        let (rows, vals) = m.col(j);
        for (&r, &v) in rows.iter().zip(vals) {
            t.push(r, j / 3, v);
        }
    }
    t.into_csc()
}

/// Stack blocks vertically (shared column space).
pub(crate) fn vstack_csc(blocks: &[CscMatrix]) -> CscMatrix {
    let ncols = blocks.first().map_or(0, |b| b.ncols());
    debug_assert!(blocks.iter().all(|b| b.ncols() == ncols));
    let nrows = blocks.iter().map(|b| b.nrows()).sum();
    let mut t = Triplets::new(nrows, ncols);
    let mut offset = 0;
    for b in blocks {
        for j in 0..b.ncols() {
            let (rows, vals) = b.col(j);
            for (&r, &v) in rows.iter().zip(vals) {
                t.push(offset + r, j, v);
            }
        }
        offset += b.nrows();
    }
    t.into_csc()
}

/// Stack blocks horizontally (shared row space).
pub(crate) fn hstack_csc(blocks: &[CscMatrix]) -> CscMatrix {
    let nrows = blocks.first().map_or(0, |b| b.nrows());
    debug_assert!(blocks.iter().all(|b| b.nrows() == nrows));
    let ncols = blocks.iter().map(|b| b.ncols()).sum();
    let mut t = Triplets::new(nrows, ncols);
    let mut offset = 0;
    for b in blocks {
        for j in 0..b.ncols() {
            let (rows, vals) = b.col(j);
            for (&r, &v) in rows.iter().zip(vals) {
                t.push(r, offset + j, v);
            }
        }
        offset += b.ncols();
    }
    t.into_csc()
}

/// Square block-diagonal concatenation.
pub(crate) fn block_diag_csc(blocks: &[CscMatrix]) -> CscMatrix {
    let nrows = blocks.iter().map(|b| b.nrows()).sum();
    let ncols = blocks.iter().map(|b| b.ncols()).sum();
    let mut t = Triplets::new(nrows, ncols);
    let (mut ro, mut co) = (0, 0);
    for b in blocks {
        for j in 0..b.ncols() {
            let (rows, vals) = b.col(j);
            for (&r, &v) in rows.iter().zip(vals) {
                t.push(ro + r, co + j, v);
            }
        }
        ro += b.nrows();
        co += b.ncols();
    }
    t.into_csc()
}

/// Dense-to-sparse conversion dropping exact zeros.
pub(crate) fn dense_to_csc(m: &DMatrix<f64>) -> CscMatrix {
    let mut t = Triplets::new(m.nrows(), m.ncols());
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            let v = m[(i, j)];
            if v != 0.0 {
                t.push(i, j, v);
            }
        }
    }
    t.into_csc()
}

/// A `1 × n` row vector.
pub(crate) fn csc_row(values: &[f64]) -> CscMatrix {
    let mut t = Triplets::new(1, values.len());
    for (j, &v) in values.iter().enumerate() {
        if v != 0.0 {
            t.push(0, j, v);
        }
    }
    t.into_csc()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// `y = x` (explicit).
    struct Identity {
        name: String,
        input: String,
        output: String,
        n: usize,
    }

    impl Component for Identity {
        fn name(&self) -> &str {
            &self.name
        }
        fn inputs(&self) -> Vec<VarSpec> {
            vec![VarSpec::new(&self.input, self.n)]
        }
        fn outputs(&self) -> Vec<VarSpec> {
            vec![VarSpec::new(&self.output, self.n)]
        }
        fn eval(&mut self, inputs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
            Ok(vec![inputs[0].to_vec()])
        }
        fn partials(&mut self, _: &[&[f64]], _: &[&[f64]]) -> Result<Partials> {
            let mut p = Partials::explicit();
            p.push(0, 0, CscMatrix::identity(self.n));
            Ok(p)
        }
    }

    /// Componentwise implicit state: `R(x, y) = y + y³ − x = 0`.
    struct CubicRoot {
        name: String,
        input: String,
        output: String,
        n: usize,
        fail: bool,
        singular: bool,
    }

    impl CubicRoot {
        fn new(name: &str, input: &str, output: &str, n: usize) -> Self {
            CubicRoot {
                name: name.into(),
                input: input.into(),
                output: output.into(),
                n,
                fail: false,
                singular: false,
            }
        }
    }

    impl Component for CubicRoot {
        fn name(&self) -> &str {
            &self.name
        }
        fn kind(&self) -> ComponentKind {
            ComponentKind::Implicit
        }
        fn inputs(&self) -> Vec<VarSpec> {
            vec![VarSpec::new(&self.input, self.n)]
        }
        fn outputs(&self) -> Vec<VarSpec> {
            vec![VarSpec::new(&self.output, self.n)]
        }
        fn eval(&mut self, inputs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
            if self.fail {
                return Err(Error::NewtonDiverged {
                    iterations: 3,
                    history: vec![1.0, 2.0, 4.0],
                });
            }
            // Scalar Newton per entry; the map is strictly monotone.
            let y: Vec<f64> = inputs[0]
                .iter()
                .map(|&x| {
                    let mut y = x;
                    for _ in 0..60 {
                        let r = y + y * y * y - x;
                        y -= r / (1.0 + 3.0 * y * y);
                        if r.abs() < 1e-15 {
                            break;
                        }
                    }
                    y
                })
                .collect();
            Ok(vec![y])
        }
        fn partials(&mut self, _: &[&[f64]], outputs: &[&[f64]]) -> Result<Partials> {
            let mut jr = Triplets::new(self.n, self.n);
            let mut jx = Triplets::new(self.n, self.n);
            for (i, &y) in outputs[0].iter().enumerate() {
                if !self.singular {
                    jr.push(i, i, 1.0 + 3.0 * y * y);
                }
                jx.push(i, i, -1.0);
            }
            let mut p = Partials::implicit(jr.into_csc());
            p.push(0, 0, jx.into_csc());
            Ok(p)
        }
    }

    /// `f = Σ xᵢ²` (explicit, scalar output).
    struct SumSquares {
        name: String,
        input: String,
        output: String,
        n: usize,
    }

    impl Component for SumSquares {
        fn name(&self) -> &str {
            &self.name
        }
        fn inputs(&self) -> Vec<VarSpec> {
            vec![VarSpec::new(&self.input, self.n)]
        }
        fn outputs(&self) -> Vec<VarSpec> {
            vec![VarSpec::new(&self.output, 1)]
        }
        fn eval(&mut self, inputs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
            Ok(vec![vec![inputs[0].iter().map(|x| x * x).sum()]])
        }
        fn partials(&mut self, inputs: &[&[f64]], _: &[&[f64]]) -> Result<Partials> {
            let grad: Vec<f64> = inputs[0].iter().map(|x| 2.0 * x).collect();
            let mut p = Partials::explicit();
            p.push(0, 0, csc_row(&grad));
            Ok(p)
        }
    }

    fn design(name: &str, values: &[f64]) -> (DesignVar, BTreeMap<String, Vec<f64>>) {
        let dv = DesignVar::free(name, values.len());
        let mut point = BTreeMap::new();
        point.insert(name.to_string(), values.to_vec());
        (dv, point)
    }

    #[test]
    fn identity_roundtrip_and_unit_jacobian() {
        let mut g = ComponentGraph::new();
        g.add_component(Box::new(Identity {
            name: "ident".into(),
            input: "x".into(),
            output: "y".into(),
            n: 3,
        }));
        let (dv, point) = design("x", &[1.0, -2.0, 0.5]);
        g.add_design_var(dv);
        let vals = g.forward_eval(&point).unwrap();
        assert_eq!(vals["y"], vec![1.0, -2.0, 0.5]);
        let totals = g.adjoint_total_derivatives(&["y"]).unwrap();
        let block = totals.block("y", "x").unwrap();
        assert_eq!(*block, DMatrix::identity(3, 3));
        let direct = g.direct_total_derivatives(&["y"]).unwrap();
        assert_eq!(*direct.block("y", "x").unwrap(), DMatrix::identity(3, 3));
    }

    #[test]
    fn linear_chain_composes_to_matrix_product() {
        use super::components::LinearComp;
        // y = A x (3×4), z = B y (2×3): dz/dx must be exactly B·A.
        let a = DMatrix::from_row_slice(3, 4, &[
            1.0, 2.0, 0.0, -1.0, //
            0.5, 0.0, 3.0, 1.0, //
            -2.0, 1.0, 1.0, 0.0,
        ]);
        let b = DMatrix::from_row_slice(2, 3, &[
            2.0, -1.0, 0.5, //
            0.0, 1.5, 1.0,
        ]);
        let mut g = ComponentGraph::new();
        g.add_component(Box::new(
            LinearComp::new("first", vec![VarSpec::new("x", 4)], "y", vec![dense_to_csc(&a)], None)
                .unwrap(),
        ));
        g.add_component(Box::new(
            LinearComp::new("second", vec![VarSpec::new("y", 3)], "z", vec![dense_to_csc(&b)], None)
                .unwrap(),
        ));
        let (dv, point) = design("x", &[0.3, -0.7, 1.1, 0.2]);
        g.add_design_var(dv);
        g.forward_eval(&point).unwrap();
        let totals = g.adjoint_total_derivatives(&["z"]).unwrap();
        let ba = &b * &a;
        assert_eq!(*totals.block("z", "x").unwrap(), ba);
        let direct = g.direct_total_derivatives(&["z"]).unwrap();
        assert_eq!(*direct.block("z", "x").unwrap(), ba);
    }

    #[test]
    fn implicit_chain_adjoint_matches_direct_and_fd() {
        let x0 = [0.8, -1.3, 2.0, 0.1];
        let build = || {
            let mut g = ComponentGraph::new();
            g.add_component(Box::new(CubicRoot::new("root", "x", "y", 4)));
            g.add_component(Box::new(SumSquares {
                name: "obj".into(),
                input: "y".into(),
                output: "f".into(),
                n: 4,
            }));
            g.add_design_var(DesignVar::free("x", 4));
            g
        };
        let mut point = BTreeMap::new();
        point.insert("x".to_string(), x0.to_vec());

        let mut g = build();
        g.forward_eval(&point).unwrap();
        let adj = g.adjoint_total_derivatives(&["f"]).unwrap();
        let dir = g.direct_total_derivatives(&["f"]).unwrap();
        let ga = adj.gradient("f").unwrap();
        let gd = dir.gradient("f").unwrap();
        for (a, d) in ga.iter().zip(&gd) {
            assert_relative_eq!(a, d, epsilon = 1e-12, max_relative = 1e-10);
        }

        // Central finite differences through fresh forward evaluations.
        let h = 1e-6;
        for i in 0..4 {
            let mut gp = build();
            let mut pp = point.clone();
            pp.get_mut("x").unwrap()[i] += h;
            let fp = gp.forward_eval(&pp).unwrap()["f"][0];
            let mut gm = build();
            let mut pm = point.clone();
            pm.get_mut("x").unwrap()[i] -= h;
            let fm = gm.forward_eval(&pm).unwrap()["f"][0];
            let fd = (fp - fm) / (2.0 * h);
            assert_relative_eq!(ga[i], fd, max_relative = 1e-7);
        }
    }

    #[test]
    fn adjoint_solves_once_per_seeded_output() {
        let mut g = ComponentGraph::new();
        g.add_component(Box::new(CubicRoot::new("root", "x", "y", 5)));
        g.add_design_var(DesignVar::free("x", 5));
        let mut point = BTreeMap::new();
        point.insert("x".to_string(), vec![0.2; 5]);
        g.forward_eval(&point).unwrap();

        g.adjoint_total_derivatives(&["y"]).unwrap();
        let counts = g.adjoint_solve_counts();
        assert_eq!(counts, vec![("root".to_string(), 5)]);

        // A scalar-seeded request adds exactly one more transpose solve.
        let mut g2 = ComponentGraph::new();
        g2.add_component(Box::new(CubicRoot::new("root", "x", "y", 5)));
        g2.add_component(Box::new(SumSquares {
            name: "obj".into(),
            input: "y".into(),
            output: "f".into(),
            n: 5,
        }));
        g2.add_design_var(DesignVar::free("x", 5));
        g2.forward_eval(&point).unwrap();
        g2.adjoint_total_derivatives(&["f"]).unwrap();
        assert_eq!(g2.adjoint_solve_counts(), vec![("root".to_string(), 1)]);
    }

    #[test]
    fn repeated_evaluation_is_bit_identical() {
        let run = || {
            let mut g = ComponentGraph::new();
            g.add_component(Box::new(CubicRoot::new("root", "x", "y", 4)));
            g.add_component(Box::new(SumSquares {
                name: "obj".into(),
                input: "y".into(),
                output: "f".into(),
                n: 4,
            }));
            g.add_design_var(DesignVar::free("x", 4));
            let mut point = BTreeMap::new();
            point.insert("x".to_string(), vec![0.37, -0.11, 1.9, -2.4]);
            let vals = g.forward_eval(&point).unwrap();
            let grad = g
                .adjoint_total_derivatives(&["f"])
                .unwrap()
                .gradient("f")
                .unwrap();
            (vals["f"][0], grad)
        };
        let (f1, g1) = run();
        let (f2, g2) = run();
        assert_eq!(f1.to_bits(), f2.to_bits());
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn unconnected_input_is_rejected() {
        let mut g = ComponentGraph::new();
        g.add_component(Box::new(Identity {
            name: "ident".into(),
            input: "missing".into(),
            output: "y".into(),
            n: 2,
        }));
        let err = g.finalize().unwrap_err().to_string();
        assert!(err.contains("missing") && err.contains("ident"), "{err}");
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let mut g = ComponentGraph::new();
        g.add_component(Box::new(Identity {
            name: "ident".into(),
            input: "x".into(),
            output: "y".into(),
            n: 2,
        }));
        g.add_design_var(DesignVar::free("x", 3));
        let err = g.finalize().unwrap_err().to_string();
        assert!(err.contains("size"), "{err}");
    }

    #[test]
    fn duplicate_output_names_are_rejected() {
        let mut g = ComponentGraph::new();
        for name in ["a", "b"] {
            g.add_component(Box::new(Identity {
                name: name.into(),
                input: "x".into(),
                output: "y".into(),
                n: 2,
            }));
        }
        g.add_design_var(DesignVar::free("x", 2));
        let err = g.finalize().unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn dependency_cycle_is_detected() {
        let mut g = ComponentGraph::new();
        g.add_component(Box::new(Identity {
            name: "fwd".into(),
            input: "p".into(),
            output: "q".into(),
            n: 2,
        }));
        g.add_component(Box::new(Identity {
            name: "back".into(),
            input: "q".into(),
            output: "p".into(),
            n: 2,
        }));
        let err = g.finalize().unwrap_err().to_string();
        assert!(err.contains("cycle"), "{err}");
    }

    #[test]
    fn explicit_connection_overrides_name_matching() {
        let mut g = ComponentGraph::new();
        g.add_component(Box::new(Identity {
            name: "ident".into(),
            input: "a".into(),
            output: "y".into(),
            n: 2,
        }));
        g.add_design_var(DesignVar::free("b", 2));
        g.connect("b", "ident", "a");
        let mut point = BTreeMap::new();
        point.insert("b".to_string(), vec![4.0, 5.0]);
        let vals = g.forward_eval(&point).unwrap();
        assert_eq!(vals["y"], vec![4.0, 5.0]);
    }

    #[test]
    fn inner_solver_failure_names_the_component() {
        let mut g = ComponentGraph::new();
        let mut comp = CubicRoot::new("disp_solver", "x", "y", 3);
        comp.fail = true;
        g.add_component(Box::new(comp));
        g.add_design_var(DesignVar::free("x", 3));
        let mut point = BTreeMap::new();
        point.insert("x".to_string(), vec![0.0; 3]);
        let err = g.forward_eval(&point).unwrap_err().to_string();
        assert!(err.contains("disp_solver"), "{err}");
    }

    #[test]
    fn singular_state_jacobian_names_the_component() {
        let mut g = ComponentGraph::new();
        let mut comp = CubicRoot::new("stuck", "x", "y", 3);
        comp.singular = true;
        g.add_component(Box::new(comp));
        g.add_design_var(DesignVar::free("x", 3));
        let mut point = BTreeMap::new();
        point.insert("x".to_string(), vec![0.1; 3]);
        g.forward_eval(&point).unwrap();
        let err = g.adjoint_total_derivatives(&["y"]).unwrap_err().to_string();
        assert!(err.contains("singular") && err.contains("stuck"), "{err}");
    }

    #[test]
    fn wrong_partial_shape_is_rejected() {
        struct BadShape;
        impl Component for BadShape {
            fn name(&self) -> &str {
                "bad"
            }
            fn inputs(&self) -> Vec<VarSpec> {
                vec![VarSpec::new("x", 3)]
            }
            fn outputs(&self) -> Vec<VarSpec> {
                vec![VarSpec::new("y", 3)]
            }
            fn eval(&mut self, inputs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
                Ok(vec![inputs[0].to_vec()])
            }
            fn partials(&mut self, _: &[&[f64]], _: &[&[f64]]) -> Result<Partials> {
                let mut p = Partials::explicit();
                p.push(0, 0, CscMatrix::identity(2));
                Ok(p)
            }
        }
        let mut g = ComponentGraph::new();
        g.add_component(Box::new(BadShape));
        g.add_design_var(DesignVar::free("x", 3));
        let mut point = BTreeMap::new();
        point.insert("x".to_string(), vec![0.0; 3]);
        g.forward_eval(&point).unwrap();
        let err = g.adjoint_total_derivatives(&["y"]).unwrap_err().to_string();
        assert!(err.contains("expected 3x3"), "{err}");
    }

    #[test]
    fn objective_must_be_scalar() {
        let mut g = ComponentGraph::new();
        g.add_component(Box::new(Identity {
            name: "ident".into(),
            input: "x".into(),
            output: "y".into(),
            n: 2,
        }));
        g.add_design_var(DesignVar::free("x", 2));
        g.set_objective("y");
        let err = g.finalize().unwrap_err().to_string();
        assert!(err.contains("scalar"), "{err}");
    }

    #[test]
    fn stack_and_select_helpers() {
        let a = dense_to_csc(&DMatrix::from_row_slice(2, 3, &[1., 2., 3., 4., 5., 6.]));
        let b = dense_to_csc(&DMatrix::from_row_slice(1, 3, &[7., 8., 9.]));
        let v = vstack_csc(&[a.clone(), b.clone()]);
        assert_eq!(v.nrows(), 3);
        assert_eq!(v.to_dense()[(2, 1)], 8.0);
        let h = hstack_csc(&[b.clone(), b.clone()]);
        assert_eq!(h.ncols(), 6);
        assert_eq!(h.to_dense()[(0, 4)], 8.0);
        let d = block_diag_csc(&[a.clone(), b]);
        assert_eq!((d.nrows(), d.ncols()), (3, 6));
        assert_eq!(d.to_dense()[(2, 3)], 7.0);
        assert_eq!(d.to_dense()[(2, 0)], 0.0);

        let m = dense_to_csc(&DMatrix::from_row_slice(2, 6, &[
            0., 1., 2., 3., 4., 5., //
            6., 7., 8., 9., 10., 11.,
        ]));
        let f2 = select_field_columns(&m, 2);
        assert_eq!((f2.nrows(), f2.ncols()), (2, 2));
        assert_eq!(f2.to_dense()[(0, 0)], 2.0);
        assert_eq!(f2.to_dense()[(1, 1)], 11.0);
        let s = scale_csc(&m, -2.0);
        assert_eq!(s.to_dense()[(1, 3)], -18.0);
    }
}
