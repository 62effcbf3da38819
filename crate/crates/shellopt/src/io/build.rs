//! Interpreting document pairs: assembling the coupled shell model and
//! wiring the design-variable graph, constraints and optimizer problem the
//! documents describe.

use super::document::{
    Comparison, ConstraintRecord, FfdConstraint, GeometryDocument, OptimizationMode,
    ProblemDocument,
};
use crate::coupling::CoupledModel;
use crate::geometry::{
    build_extraction, build_ffd_matrix, embed_points, ffd_constraints, lagrange_nodes,
    make_ffd_block, ConstraintRow, FfdConstraints, MultiPatchModel,
};
use crate::graph::{
    differentiable_meshes, eliminate_ties, field_values, share, ComponentGraph, ConstraintSpec,
    CpIga2XiComp, DesignVar, DispComp, Fe2IgaComp, FieldReduction, IntEnergyComp, LinearComp,
    RegularizationComp, SharedModel, Totals, VarSpec, VolumeComp,
};
use crate::optimizer::{
    check_gradients, sqp_solve, GradientReport, OptProblem, OptReport,
};
use crate::shell::{Material, ShellPatch};
use crate::solver::{NewtonSettings, Triplets};
use crate::splines::{elevate_degree, refine_knots, KnotVector, NurbsSurface};
use crate::{Error, Result};
use nalgebra::DMatrix;
use std::cell::RefCell;
use std::collections::BTreeMap;

const AXES: [&str; 3] = ["x", "y", "z"];

/// Equilibrium-solver settings used for every displacement solve driven by
/// documents. The relative tolerance sits an order of magnitude above the
/// assembly roundoff floor; anything tighter stalls on noise.
pub fn analysis_settings() -> NewtonSettings {
    NewtonSettings {
        rel_tol: 2e-8,
        abs_tol: 1e-12,
        max_iter: 30,
        ..NewtonSettings::default()
    }
}

/// Assemble the coupled multipatch model a document pair describes:
/// patches with material, thickness, loads and boundary conditions, plus
/// intersections (manual traces when the geometry document carries them,
/// detected otherwise).
pub fn build_model(geometry: &GeometryDocument, problem: &ProblemDocument) -> Result<CoupledModel> {
    geometry.validate()?;
    problem.validate(geometry)?;
    let surfaces = geometry.surfaces()?;
    let material = Material::new(
        problem.material.youngs_modulus,
        problem.material.poissons_ratio,
    )?;
    let np = surfaces.len();
    let mut patches = Vec::with_capacity(np);
    for (p, surface) in surfaces.into_iter().enumerate() {
        let t = if problem.thickness.len() == 1 {
            problem.thickness[0]
        } else {
            problem.thickness[p]
        };
        patches.push(ShellPatch::new(surface, t, material.clone())?);
    }
    for bc in &problem.boundary_conditions {
        patches[bc.patch].fix_edge(bc.edge, &bc.components, bc.order);
    }
    for load in &problem.loads {
        let targets: Vec<usize> = load
            .patches
            .clone()
            .unwrap_or_else(|| (0..np).collect());
        for p in targets {
            patches[p].add_load(load.load.clone())?;
        }
    }
    let mut model = MultiPatchModel::new(patches);
    if geometry.intersections.is_empty() {
        model.detect_intersections(problem.coupling.intersection_density)?;
    } else {
        model.intersections = geometry.manual_intersections()?;
    }
    CoupledModel::new(model, problem.coupling.penalty_coefficient)
}

/// One design variable of the optimization problem: a contiguous slice of
/// the concatenated design vector.
#[derive(Debug, Clone)]
pub struct VarInfo {
    pub name: String,
    pub size: usize,
    pub offset: usize,
}

struct VolumeTarget {
    output: String,
    comparison: Comparison,
    target: f64,
}

/// Sparse linear row over the concatenated design vector.
type LinearRow = (Vec<(usize, f64)>, f64);

/// Graph evaluation with memoization of the last forward state and last
/// total-derivative sweep, so objective, gradient and constraint closures
/// sharing an iterate trigger one solve.
struct GraphDriver {
    graph: ComponentGraph,
    vars: Vec<(String, usize)>,
    outputs: Vec<String>,
    x_forward: Option<Vec<f64>>,
    values: BTreeMap<String, Vec<f64>>,
    x_totals: Option<Vec<f64>>,
    totals: Option<Totals>,
}

impl GraphDriver {
    fn point(&self, x: &[f64]) -> BTreeMap<String, Vec<f64>> {
        let mut point = BTreeMap::new();
        let mut at = 0;
        for (name, size) in &self.vars {
            point.insert(name.clone(), x[at..at + size].to_vec());
            at += size;
        }
        point
    }

    fn ensure_forward(&mut self, x: &[f64]) -> Result<()> {
        if self.x_forward.as_deref() != Some(x) {
            let point = self.point(x);
            self.values = self.graph.forward_eval(&point)?;
            self.x_forward = Some(x.to_vec());
            self.x_totals = None;
        }
        Ok(())
    }

    fn ensure_totals(&mut self, x: &[f64]) -> Result<()> {
        self.ensure_forward(x)?;
        if self.x_totals.as_deref() != Some(x) {
            let outputs: Vec<&str> = self.outputs.iter().map(String::as_str).collect();
            self.totals = Some(self.graph.adjoint_total_derivatives(&outputs)?);
            self.x_totals = Some(x.to_vec());
        }
        Ok(())
    }

    fn scalar(&self, output: &str) -> Result<f64> {
        self.values
            .get(output)
            .and_then(|v| v.first())
            .copied()
            .ok_or_else(|| Error::Graph(format!("output '{output}' missing from forward state")))
    }

    fn gradient(&self, output: &str) -> Result<Vec<f64>> {
        self.totals
            .as_ref()
            .and_then(|t| t.gradient(output))
            .ok_or_else(|| Error::Graph(format!("no total derivative recorded for '{output}'")))
    }
}

/// A fully wired optimization problem: the shared model, the component
/// graph behind a memoizing driver, design-variable layout and bounds,
/// and the constraint set.
pub struct OptSetup {
    pub model: SharedModel,
    driver: RefCell<GraphDriver>,
    vars: Vec<VarInfo>,
    pub initial: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    objective_output: String,
    volumes: Vec<VolumeTarget>,
    linear_eq: Vec<LinearRow>,
    /// Rows satisfying `terms · x ≥ rhs`.
    linear_ineq: Vec<LinearRow>,
    pub tol: f64,
    pub max_iter: usize,
}

/// Map a constraint row over a full per-field vector onto the reduced
/// design variable: compose with the expansion and fold the affine offset
/// into the right-hand side.
fn reduce_row(row: &ConstraintRow, red: &FieldReduction, var_offset: usize) -> LinearRow {
    let n = red.offset.len();
    let mut dense = vec![0.0; n];
    let mut rhs = row.rhs;
    for &(i, c) in &row.terms {
        dense[i] = c;
        rhs -= c * red.offset[i];
    }
    let reduced = red.expand.matvec_transpose(&dense);
    let terms = reduced
        .iter()
        .enumerate()
        .filter(|(_, &c)| c != 0.0)
        .map(|(j, &c)| (var_offset + j, c))
        .collect();
    (terms, rhs)
}

fn direct_row(row: &ConstraintRow, var_offset: usize) -> LinearRow {
    (
        row.terms
            .iter()
            .map(|&(i, c)| (var_offset + i, c))
            .collect(),
        row.rhs,
    )
}

/// Lattice index lines of a `(nu, nv, nw)` grid along `direction`,
/// restricted to lines long enough for a second difference.
fn lattice_lines(dims: (usize, usize, usize), flat: impl Fn(usize, usize, usize) -> usize) -> Vec<Vec<usize>> {
    let (nu, nv, nw) = dims;
    let mut lines = Vec::new();
    if nu >= 3 {
        for j in 0..nv {
            for k in 0..nw {
                lines.push((0..nu).map(|i| flat(i, j, k)).collect());
            }
        }
    }
    if nv >= 3 {
        for i in 0..nu {
            for k in 0..nw {
                lines.push((0..nv).map(|j| flat(i, j, k)).collect());
            }
        }
    }
    if nw >= 3 {
        for i in 0..nu {
            for j in 0..nv {
                lines.push((0..nw).map(|k| flat(i, j, k)).collect());
            }
        }
    }
    lines
}

/// What a design chain contributes to one global per-field control-point
/// vector.
struct Contribution {
    input: String,
    input_size: usize,
    patches: Vec<usize>,
    /// `None`: the input is the fitted control-point stack of `patches`
    /// in order (identity placement). `Some(t)`: dense transfer from the
    /// input onto the single patch in `patches`.
    transfer: Option<DMatrix<f64>>,
}

/// Multiset difference of two clamped knot vectors: the knots to insert
/// into `coarse` to reach `fine`. Fails when `coarse` is not a subset.
fn knot_insertions(coarse: &[f64], fine: &[f64], label: &str) -> Result<Vec<f64>> {
    let mut add = Vec::new();
    let (mut i, mut j) = (0usize, 0usize);
    let eq = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()));
    while j < fine.len() {
        if i < coarse.len() && eq(coarse[i], fine[j]) {
            i += 1;
            j += 1;
        } else if i >= coarse.len() || fine[j] < coarse[i] {
            add.push(fine[j]);
            j += 1;
        } else {
            return Err(Error::InvalidGeometry(format!(
                "{label}: design knot {} is absent from the analysis knot vector",
                coarse[i]
            )));
        }
    }
    if i < coarse.len() {
        return Err(Error::InvalidGeometry(format!(
            "{label}: design knot vector has {} surplus knots",
            coarse.len() - i
        )));
    }
    Ok(add)
}

/// Least-squares fit `argmin ‖T c − a‖`; errors when the residual shows
/// `a` does not lie in the design space.
fn fit_design_values(t: &DMatrix<f64>, a: &[f64], label: &str) -> Result<Vec<f64>> {
    let av = DMatrix::from_column_slice(a.len(), 1, a);
    let tt = t.transpose() * t;
    let rhs = t.transpose() * &av;
    let c = tt
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::SingularMatrix {
            pivot: 0,
            magnitude: 0.0,
        })
        .map_err(|_| {
            Error::InvalidGeometry(format!("{label}: design space fit is singular"))
        })?;
    let res = t * &c - &av;
    let scale = 1.0 + a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let worst = res.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if worst > 1e-8 * scale {
        return Err(Error::InvalidGeometry(format!(
            "{label}: baseline geometry lies outside the design space (fit residual {worst:.3e})"
        )));
    }
    Ok(c.column(0).iter().copied().collect())
}

/// Build the optimization problem a document pair describes.
pub fn build_optimization(
    geometry: &GeometryDocument,
    problem: &ProblemDocument,
) -> Result<OptSetup> {
    let coupled = build_model(geometry, problem)?;
    let np = coupled.model.patches.len();
    let cps_per_patch: Vec<usize> = coupled
        .model
        .patches
        .iter()
        .map(|p| p.surface().num_cps())
        .collect();
    let mut field_offsets = vec![0usize; np + 1];
    for p in 0..np {
        field_offsets[p + 1] = field_offsets[p] + cps_per_patch[p];
    }
    let baseline: [Vec<f64>; 3] = [
        field_values(&coupled, 0),
        field_values(&coupled, 1),
        field_values(&coupled, 2),
    ];
    let baseline_volumes: Vec<f64> = coupled
        .model
        .patches
        .iter()
        .map(|p| p.volume())
        .collect::<Result<_>>()?;

    let shared = share(coupled);
    let mut graph = ComponentGraph::new();
    let mut vars: Vec<VarInfo> = Vec::new();
    let mut initial: Vec<f64> = Vec::new();
    let mut lower: Vec<f64> = Vec::new();
    let mut upper: Vec<f64> = Vec::new();
    let mut linear_eq: Vec<LinearRow> = Vec::new();
    let mut linear_ineq: Vec<LinearRow> = Vec::new();
    let mut contributions: BTreeMap<usize, Vec<Contribution>> = BTreeMap::new();
    let mut regu_terms: Vec<String> = Vec::new();
    let regu_weight = problem.objective.regularization_weight;

    // --- FFD chains ---------------------------------------------------
    for (b, rec) in problem.ffd.iter().enumerate() {
        let bpatches: Vec<usize> = rec
            .patches
            .clone()
            .unwrap_or_else(|| (0..np).collect());
        let mut fields: Vec<usize> = rec
            .opt_field
            .clone()
            .unwrap_or_else(|| problem.opt_field.clone());
        fields.sort_unstable();
        fields.dedup();

        // Embed the Lagrange nodes of every covered patch.
        let (block_vol, ffd_matrix, stacked_extraction, fit_size) = {
            let m = shared.borrow();
            let (lo, hi) = match rec.bounds {
                Some(bounds) => (
                    [bounds[0][0], bounds[1][0], bounds[2][0]],
                    [bounds[0][1], bounds[1][1], bounds[2][1]],
                ),
                None => {
                    let mut lo = [f64::INFINITY; 3];
                    let mut hi = [f64::NEG_INFINITY; 3];
                    for &p in &bpatches {
                        for cp in m.model.patches[p].surface().control_points() {
                            for k in 0..3 {
                                lo[k] = lo[k].min(cp[k]);
                                hi[k] = hi[k].max(cp[k]);
                            }
                        }
                    }
                    (lo, hi)
                }
            };
            let block_vol = make_ffd_block(rec.nel, rec.degree, lo, hi).map_err(|e| {
                Error::InvalidGeometry(format!(
                    "FFD block {b}: {e} (degenerate axes need explicit bounds)"
                ))
            })?;
            let mut params = Vec::new();
            let mut extractions = Vec::new();
            let mut fit_size = 0usize;
            for &p in &bpatches {
                let surface = m.model.patches[p].surface();
                let nodes = lagrange_nodes(surface);
                let pts: Vec<[f64; 3]> = nodes
                    .params()
                    .iter()
                    .map(|&(u, v)| surface.eval(u, v))
                    .collect();
                params.extend(embed_points(
                    &block_vol,
                    &pts,
                    &format!("FFD block {b}, patch {p}"),
                )?);
                extractions.push(build_extraction(surface, &nodes));
                fit_size += surface.num_cps();
            }
            let ffd_matrix = build_ffd_matrix(&block_vol, &params);
            let refs: Vec<_> = extractions.iter().map(|e| e.matrix()).collect();
            (block_vol, ffd_matrix, Fe2IgaComp::block_diag(&refs), fit_size)
        };
        let n_lat = block_vol.num_cps();
        let dims = block_vol.dims();

        // Lattice constraints from the block's specification.
        let mut specs: Vec<FfdConstraint> = Vec::new();
        for &d in &rec.align {
            specs.push(FfdConstraint::Align { direction: d });
        }
        for pin in &rec.pins {
            specs.push(FfdConstraint::Pin {
                dir0: pin.dir0,
                side0: pin.side0,
                dir1: pin.dir1.map(|[d, s]| (d, s)),
                fields: pin.fields.clone(),
            });
        }
        for regu in &rec.regularization {
            specs.push(FfdConstraint::Regu {
                direction: regu.direction,
                fields: regu.fields.clone(),
                min_gap: regu.min_gap,
            });
        }
        let cons: FfdConstraints = ffd_constraints(&block_vol, &specs)?;

        for &f in &fields {
            let axis = AXES[f];
            let var = if problem.ffd.len() == 1 {
                format!("CP_FFD_{axis}")
            } else {
                format!("CP_FFD{b}_{axis}")
            };
            let lat_f: Vec<f64> = block_vol.control_points().iter().map(|cp| cp[f]).collect();
            let mut lower_f = vec![f64::NEG_INFINITY; n_lat];
            let mut upper_f = vec![f64::INFINITY; n_lat];
            for lim in rec.limits.iter().filter(|l| l.field == f) {
                if let Some(lo) = lim.lower {
                    lower_f.iter_mut().for_each(|v| *v = lo);
                }
                if let Some(hi) = lim.upper {
                    upper_f.iter_mut().for_each(|v| *v = hi);
                }
            }

            let eqs: Vec<ConstraintRow> = cons
                .equalities
                .iter()
                .filter(|r| r.field == f)
                .cloned()
                .collect();
            let ineqs: Vec<ConstraintRow> = cons
                .inequalities
                .iter()
                .filter(|r| r.field == f)
                .cloned()
                .collect();

            let var_offset = initial.len();
            let reduction = eliminate_ties(n_lat, &eqs);
            let lattice_output; // variable carrying the full lattice field
            match &reduction {
                Some(red) => {
                    let reduced = red.reduced_size();
                    if reduced == 0 {
                        return Err(Error::InvalidGeometry(format!(
                            "FFD block {b} field {axis}: every lattice point is pinned"
                        )));
                    }
                    if reduced < n_lat {
                        lattice_output = format!("{var}_full");
                        graph.add_component(Box::new(red.clone().into_component(
                            format!("{var}_expand"),
                            &var,
                            &lattice_output,
                        )?));
                        initial.extend(red.restrict_values(&lat_f));
                        lower.extend(red.restrict_values(&lower_f));
                        upper.extend(red.restrict_values(&upper_f));
                        vars.push(VarInfo {
                            name: var.clone(),
                            size: reduced,
                            offset: var_offset,
                        });
                        for row in &ineqs {
                            let (terms, rhs) = reduce_row(row, red, var_offset);
                            if !terms.is_empty() {
                                linear_ineq.push((terms, rhs));
                            }
                        }
                    } else {
                        lattice_output = var.clone();
                        initial.extend(lat_f.iter().copied());
                        lower.extend(lower_f.iter().copied());
                        upper.extend(upper_f.iter().copied());
                        vars.push(VarInfo {
                            name: var.clone(),
                            size: n_lat,
                            offset: var_offset,
                        });
                        for row in &ineqs {
                            linear_ineq.push(direct_row(row, var_offset));
                        }
                    }
                }
                None => {
                    // Ties and pins conflict or rows are general: keep the
                    // full lattice and hand the rows to the optimizer.
                    lattice_output = var.clone();
                    initial.extend(lat_f.iter().copied());
                    lower.extend(lower_f.iter().copied());
                    upper.extend(upper_f.iter().copied());
                    vars.push(VarInfo {
                        name: var.clone(),
                        size: n_lat,
                        offset: var_offset,
                    });
                    for row in &eqs {
                        linear_eq.push(direct_row(row, var_offset));
                    }
                    for row in &ineqs {
                        linear_ineq.push(direct_row(row, var_offset));
                    }
                }
            }

            graph.add_component(Box::new(LinearComp::new(
                format!("{var}_nodes"),
                vec![VarSpec::new(&lattice_output, n_lat)],
                format!("{var}_nodal"),
                vec![ffd_matrix.clone()],
                None,
            )?));
            graph.add_component(Box::new(Fe2IgaComp::new(
                format!("{var}_fit"),
                format!("{var}_nodal"),
                format!("{var}_fitted"),
                &stacked_extraction,
            )?));
            contributions.entry(f).or_default().push(Contribution {
                input: format!("{var}_fitted"),
                input_size: fit_size,
                patches: bpatches.clone(),
                transfer: None,
            });

            if regu_weight > 0.0 {
                let lines = lattice_lines(dims, |i, j, k| block_vol.cp_index(i, j, k));
                if !lines.is_empty() {
                    let output = format!("{var}_regu");
                    graph.add_component(Box::new(RegularizationComp::new(
                        format!("{var}_smooth"),
                        VarSpec::new(&lattice_output, n_lat),
                        &lines,
                        &output,
                    )?));
                    regu_terms.push(output);
                }
            }
        }
    }

    // --- Multilevel design chains --------------------------------------
    if let Some(dm) = &problem.design_model {
        for space in &dm.spaces {
            let p = space.patch;
            let f = space.field;
            let axis = AXES[f];
            let var = format!("CP_DES{p}_{axis}");
            let label = format!("design space for patch {p} field {axis}");

            let (t, n_d, nu_d, nv_d, a_f) = {
                let m = shared.borrow();
                let surface = m.model.patches[p].surface();
                if surface.weights().iter().any(|&w| w != 1.0) {
                    return Err(Error::InvalidGeometry(format!(
                        "{label}: multilevel design requires unit weights on the analysis patch"
                    )));
                }
                let (pa_u, pa_v) = surface.degrees();
                if let Some([eu, ev]) = space.elevate_to {
                    if eu != pa_u || ev != pa_v {
                        return Err(Error::InvalidGeometry(format!(
                            "{label}: elevation target ({eu}, {ev}) differs from the analysis degrees ({pa_u}, {pa_v})"
                        )));
                    }
                }
                let single_span = |degree: usize| -> Vec<f64> {
                    let mut k = vec![0.0; degree + 1];
                    k.extend(std::iter::repeat(1.0).take(degree + 1));
                    k
                };
                let [pd_u, pd_v] = space.degrees;
                let ku = KnotVector::new(
                    pd_u,
                    space.knots_u.clone().unwrap_or_else(|| single_span(pd_u)),
                )?;
                let kv = KnotVector::new(
                    pd_v,
                    space.knots_v.clone().unwrap_or_else(|| single_span(pd_v)),
                )?;
                if pd_u > pa_u || pd_v > pa_v {
                    return Err(Error::InvalidGeometry(format!(
                        "{label}: design degrees ({pd_u}, {pd_v}) exceed the analysis degrees ({pa_u}, {pa_v})"
                    )));
                }
                let (nu_d, nv_d) = (ku.num_basis(), kv.num_basis());
                let n_d = nu_d * nv_d;
                let placeholder = NurbsSurface::new(
                    ku,
                    kv,
                    vec![[0.0; 3]; n_d],
                    vec![1.0; n_d],
                )?;
                let t1 = elevate_degree(&placeholder, pa_u - pd_u, pa_v - pd_v)?;
                let add_u = knot_insertions(
                    t1.surface.knots_u().knots(),
                    surface.knots_u().knots(),
                    &label,
                )?;
                let add_v = knot_insertions(
                    t1.surface.knots_v().knots(),
                    surface.knots_v().knots(),
                    &label,
                )?;
                let t2 = refine_knots(&t1.surface, &add_u, &add_v)?;
                let n_mid = t1.surface.num_cps();
                let n_a = surface.num_cps();
                if t2.surface.num_cps() != n_a {
                    return Err(Error::InvalidGeometry(format!(
                        "{label}: refined design space has {} control points, analysis has {n_a}",
                        t2.surface.num_cps()
                    )));
                }
                let mut t1m = DMatrix::zeros(n_mid, n_d);
                for r in 0..n_mid {
                    for c in 0..n_d {
                        t1m[(r, c)] = t1.cp_coefficient(r, c);
                    }
                }
                let mut t2m = DMatrix::zeros(n_a, n_mid);
                for r in 0..n_a {
                    for c in 0..n_mid {
                        t2m[(r, c)] = t2.cp_coefficient(r, c);
                    }
                }
                let a_f: Vec<f64> = surface.control_points().iter().map(|cp| cp[f]).collect();
                (t2m * t1m, n_d, nu_d, nv_d, a_f)
            };

            let c0 = fit_design_values(&t, &a_f, &label)?;
            let var_offset = initial.len();
            let design_output;
            let mut align_rows: Vec<ConstraintRow> = Vec::new();
            if let Some(dir) = space.align {
                let flat = |i: usize, j: usize| i * nv_d + j;
                if dir == 0 {
                    for j in 0..nv_d {
                        for i in 1..nu_d {
                            align_rows.push(ConstraintRow {
                                field: f,
                                terms: vec![(flat(i, j), 1.0), (flat(0, j), -1.0)],
                                rhs: 0.0,
                            });
                        }
                    }
                } else {
                    for i in 0..nu_d {
                        for j in 1..nv_d {
                            align_rows.push(ConstraintRow {
                                field: f,
                                terms: vec![(flat(i, j), 1.0), (flat(i, 0), -1.0)],
                                rhs: 0.0,
                            });
                        }
                    }
                }
            }
            let reduction = if align_rows.is_empty() {
                None
            } else {
                eliminate_ties(n_d, &align_rows)
            };
            match &reduction {
                Some(red) if red.reduced_size() < n_d => {
                    design_output = format!("{var}_full");
                    graph.add_component(Box::new(red.clone().into_component(
                        format!("{var}_expand"),
                        &var,
                        &design_output,
                    )?));
                    initial.extend(red.restrict_values(&c0));
                    vars.push(VarInfo {
                        name: var.clone(),
                        size: red.reduced_size(),
                        offset: var_offset,
                    });
                    lower.extend(vec![f64::NEG_INFINITY; red.reduced_size()]);
                    upper.extend(vec![f64::INFINITY; red.reduced_size()]);
                }
                _ => {
                    design_output = var.clone();
                    initial.extend(c0.iter().copied());
                    vars.push(VarInfo {
                        name: var.clone(),
                        size: n_d,
                        offset: var_offset,
                    });
                    lower.extend(vec![f64::NEG_INFINITY; n_d]);
                    upper.extend(vec![f64::INFINITY; n_d]);
                    for row in &align_rows {
                        linear_eq.push(direct_row(row, var_offset));
                    }
                }
            }
            contributions.entry(f).or_default().push(Contribution {
                input: design_output,
                input_size: n_d,
                patches: vec![p],
                transfer: Some(t),
            });
        }
    }

    if contributions.is_empty() {
        return Err(Error::InvalidGeometry(
            "the problem document defines no design variables".into(),
        ));
    }

    // --- Per-field scatter onto the global control-point vectors -------
    let fields: Vec<usize> = contributions.keys().copied().collect();
    let field_names: Vec<String> = fields.iter().map(|&f| format!("CP_IGA_{}", AXES[f])).collect();
    for (&f, name) in fields.iter().zip(&field_names) {
        let contribs = &contributions[&f];
        let total = field_offsets[np];
        let mut covered = vec![false; total];
        let mut inputs = Vec::new();
        let mut blocks = Vec::new();
        for contrib in contribs {
            inputs.push(VarSpec::new(&contrib.input, contrib.input_size));
            let mut t = Triplets::new(total, contrib.input_size);
            match &contrib.transfer {
                None => {
                    let mut at = 0usize;
                    for &p in &contrib.patches {
                        for k in 0..cps_per_patch[p] {
                            t.push(field_offsets[p] + k, at + k, 1.0);
                        }
                        at += cps_per_patch[p];
                    }
                }
                Some(dense) => {
                    let p = contrib.patches[0];
                    for r in 0..dense.nrows() {
                        for c in 0..dense.ncols() {
                            if dense[(r, c)] != 0.0 {
                                t.push(field_offsets[p] + r, c, dense[(r, c)]);
                            }
                        }
                    }
                }
            }
            for &p in &contrib.patches {
                for k in field_offsets[p]..field_offsets[p + 1] {
                    if covered[k] {
                        return Err(Error::InvalidGeometry(format!(
                            "patch {p} field {} is driven by more than one design chain",
                            AXES[f]
                        )));
                    }
                    covered[k] = true;
                }
            }
            blocks.push(t.into_csc());
        }
        let offset: Vec<f64> = baseline[f]
            .iter()
            .zip(&covered)
            .map(|(&v, &c)| if c { 0.0 } else { v })
            .collect();
        graph.add_component(Box::new(LinearComp::new(
            format!("cp_iga_{}", AXES[f]),
            inputs,
            name,
            blocks,
            Some(offset),
        )?));
    }

    // --- Physics -------------------------------------------------------
    let field_name_refs: Vec<&str> = field_names.iter().map(String::as_str).collect();
    let needs_xi = matches!(
        problem.mode,
        OptimizationMode::MovingIntersections | OptimizationMode::Combined
    );
    if needs_xi {
        if differentiable_meshes(&shared.borrow()).is_empty() {
            return Err(Error::InvalidGeometry(
                "moving-intersection mode requires at least one differentiable intersection"
                    .into(),
            ));
        }
        graph.add_component(Box::new(CpIga2XiComp::new(
            "relocate",
            shared.clone(),
            &fields,
            &field_name_refs,
            "xi",
        )?));
        graph.add_component(Box::new(DispComp::with_intersections(
            "disp",
            shared.clone(),
            &fields,
            &field_name_refs,
            "xi",
            "d",
            analysis_settings(),
        )?));
    } else {
        graph.add_component(Box::new(DispComp::new(
            "disp",
            shared.clone(),
            &fields,
            &field_name_refs,
            "d",
            analysis_settings(),
        )?));
    }
    graph.add_component(Box::new(IntEnergyComp::new(
        "energy",
        shared.clone(),
        &fields,
        &field_name_refs,
        "d",
        "w_int",
    )?));

    // --- Objective -------------------------------------------------------
    let objective_output = if regu_weight > 0.0 && !regu_terms.is_empty() {
        let mut terms: Vec<(&str, f64)> = vec![("w_int", 1.0)];
        for t in &regu_terms {
            terms.push((t.as_str(), regu_weight));
        }
        graph.add_component(Box::new(LinearComp::weighted_sum(
            "objective_sum",
            &terms,
            "objective",
        )?));
        "objective".to_string()
    } else {
        "w_int".to_string()
    };

    // --- Volume constraints ---------------------------------------------
    let mut volumes = Vec::new();
    for (i, c) in problem.constraints.iter().enumerate() {
        match c {
            ConstraintRecord::Volume {
                comparison,
                factor,
                patches,
            } => {
                let selected: Vec<usize> =
                    patches.clone().unwrap_or_else(|| (0..np).collect());
                let v0: f64 = selected.iter().map(|&p| baseline_volumes[p]).sum();
                let target = factor * v0;
                let output = format!("volume{i}");
                graph.add_component(Box::new(VolumeComp::new(
                    format!("volume{i}_comp"),
                    shared.clone(),
                    &fields,
                    &field_name_refs,
                    Some(selected),
                    &output,
                )?));
                let (lo, hi) = match comparison {
                    Comparison::Eq => (target, target),
                    Comparison::Le => (f64::NEG_INFINITY, target),
                    Comparison::Ge => (target, f64::INFINITY),
                };
                graph.add_constraint(ConstraintSpec {
                    output: output.clone(),
                    lower: vec![lo],
                    upper: vec![hi],
                });
                volumes.push(VolumeTarget {
                    output,
                    comparison: *comparison,
                    target,
                });
            }
        }
    }

    for v in &vars {
        graph.add_design_var(DesignVar {
            name: v.name.clone(),
            lower: lower[v.offset..v.offset + v.size].to_vec(),
            upper: upper[v.offset..v.offset + v.size].to_vec(),
        });
    }
    graph.set_objective(&objective_output);

    let mut outputs = vec![objective_output.clone()];
    outputs.extend(volumes.iter().map(|v| v.output.clone()));
    let driver = GraphDriver {
        graph,
        vars: vars.iter().map(|v| (v.name.clone(), v.size)).collect(),
        outputs,
        x_forward: None,
        values: BTreeMap::new(),
        x_totals: None,
        totals: None,
    };

    Ok(OptSetup {
        model: shared,
        driver: RefCell::new(driver),
        vars,
        initial,
        lower,
        upper,
        objective_output,
        volumes,
        linear_eq,
        linear_ineq,
        tol: problem.optimizer.tol,
        max_iter: problem.optimizer.max_iter,
    })
}

impl OptSetup {
    pub fn num_variables(&self) -> usize {
        self.initial.len()
    }

    pub fn variables(&self) -> &[VarInfo] {
        &self.vars
    }

    pub fn objective_name(&self) -> &str {
        &self.objective_output
    }

    /// Human-readable label of one entry of the design vector.
    pub fn variable_label(&self, flat: usize) -> String {
        for v in &self.vars {
            if flat < v.offset + v.size {
                return format!("{}[{}]", v.name, flat - v.offset);
            }
        }
        format!("x[{flat}]")
    }

    /// Evaluate the graph at `x`, leaving the shared model shaped by that
    /// design (control points and relocated intersections applied).
    pub fn apply_design(&self, x: &[f64]) -> Result<()> {
        self.driver.borrow_mut().ensure_forward(x)
    }

    /// Forward outputs at `x`.
    pub fn forward(&self, x: &[f64]) -> Result<BTreeMap<String, Vec<f64>>> {
        let mut driver = self.driver.borrow_mut();
        driver.ensure_forward(x)?;
        Ok(driver.values.clone())
    }

    /// Solved displacement vector at `x`.
    pub fn displacement(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut driver = self.driver.borrow_mut();
        driver.ensure_forward(x)?;
        driver
            .values
            .get("d")
            .cloned()
            .ok_or_else(|| Error::Graph("displacement output missing".into()))
    }

    /// Snapshot the (possibly reshaped) geometry as a document.
    pub fn geometry_document(&self) -> GeometryDocument {
        GeometryDocument::from_model(&self.model.borrow().model)
    }

    fn build_problem(&self) -> Result<OptProblem<'_>> {
        let n = self.num_variables();
        let driver = &self.driver;
        let obj_name = self.objective_output.clone();
        let grad_name = self.objective_output.clone();
        let mut problem = OptProblem::new(
            n,
            move |x: &[f64]| {
                let mut d = driver.borrow_mut();
                d.ensure_forward(x)?;
                d.scalar(&obj_name)
            },
            move |x: &[f64]| {
                let mut d = driver.borrow_mut();
                d.ensure_totals(x)?;
                d.gradient(&grad_name)
            },
        )
        .with_bounds(self.lower.clone(), self.upper.clone())?
        .with_tol(self.tol)
        .with_max_iter(self.max_iter);

        for vol in &self.volumes {
            let (out_v, out_j) = (vol.output.clone(), vol.output.clone());
            let target = vol.target;
            match vol.comparison {
                Comparison::Eq => {
                    problem = problem.add_equality(
                        1,
                        move |x: &[f64]| {
                            let mut d = driver.borrow_mut();
                            d.ensure_forward(x)?;
                            Ok(vec![d.scalar(&out_v)? - target])
                        },
                        move |x: &[f64]| {
                            let mut d = driver.borrow_mut();
                            d.ensure_totals(x)?;
                            Ok(DMatrix::from_row_slice(1, x.len(), &d.gradient(&out_j)?))
                        },
                    );
                }
                Comparison::Le => {
                    problem = problem.add_inequality(
                        1,
                        move |x: &[f64]| {
                            let mut d = driver.borrow_mut();
                            d.ensure_forward(x)?;
                            Ok(vec![d.scalar(&out_v)? - target])
                        },
                        move |x: &[f64]| {
                            let mut d = driver.borrow_mut();
                            d.ensure_totals(x)?;
                            Ok(DMatrix::from_row_slice(1, x.len(), &d.gradient(&out_j)?))
                        },
                    );
                }
                Comparison::Ge => {
                    problem = problem.add_inequality(
                        1,
                        move |x: &[f64]| {
                            let mut d = driver.borrow_mut();
                            d.ensure_forward(x)?;
                            Ok(vec![target - d.scalar(&out_v)?])
                        },
                        move |x: &[f64]| {
                            let mut d = driver.borrow_mut();
                            d.ensure_totals(x)?;
                            let g: Vec<f64> =
                                d.gradient(&out_j)?.iter().map(|v| -v).collect();
                            Ok(DMatrix::from_row_slice(1, x.len(), &g))
                        },
                    );
                }
            }
        }

        if !self.linear_eq.is_empty() {
            let rows = self.linear_eq.clone();
            let jac = linear_jacobian(&rows, n, 1.0);
            problem = problem.add_equality(
                rows.len(),
                move |x: &[f64]| Ok(rows.iter().map(|(t, r)| dot(t, x) - r).collect()),
                move |_| Ok(jac.clone()),
            );
        }
        if !self.linear_ineq.is_empty() {
            // terms · x ≥ rhs  →  rhs − terms · x ≤ 0
            let rows = self.linear_ineq.clone();
            let jac = linear_jacobian(&rows, n, -1.0);
            problem = problem.add_inequality(
                rows.len(),
                move |x: &[f64]| Ok(rows.iter().map(|(t, r)| r - dot(t, x)).collect()),
                move |_| Ok(jac.clone()),
            );
        }
        Ok(problem)
    }

    /// Run the optimizer from the baseline design with the document's
    /// tolerance and iteration budget.
    pub fn solve(&self) -> Result<OptReport> {
        let mut problem = self.build_problem()?;
        sqp_solve(&mut problem, &self.initial)
    }

    /// Run with overridden stopping settings.
    pub fn solve_with(&self, tol: f64, max_iter: usize) -> Result<OptReport> {
        let mut problem = self.build_problem()?.with_tol(tol).with_max_iter(max_iter);
        sqp_solve(&mut problem, &self.initial)
    }

    /// Verify the adjoint objective gradient against central differences
    /// at the baseline design.
    pub fn gradient_report(&self, relative_step: f64) -> Result<GradientReport> {
        let mut problem = self.build_problem()?;
        check_gradients(&mut problem, &self.initial, relative_step)
    }
}

fn dot(terms: &[(usize, f64)], x: &[f64]) -> f64 {
    terms.iter().map(|&(i, c)| c * x[i]).sum()
}

fn linear_jacobian(rows: &[LinearRow], n: usize, sign: f64) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(rows.len(), n);
    for (r, (terms, _)) in rows.iter().enumerate() {
        for &(i, c) in terms {
            jac[(r, i)] = sign * c;
        }
    }
    jac
}
