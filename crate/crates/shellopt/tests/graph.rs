//! End-to-end sensitivity chains: free-form-deformation design variables
//! driving a coupled two-patch shell, verified against finite differences,
//! the direct (forward) derivative mode and a frozen-intersection ablation.

use shellopt::coupling::CoupledModel;
use shellopt::geometry::{
    build_extraction, build_ffd_matrix, embed_points, lagrange_nodes, make_ffd_block,
    IntersectionKind, MultiPatchModel,
};
use shellopt::graph::{
    field_values, share, ComponentGraph, CpIga2XiComp, DesignVar, DispComp, Fe2IgaComp,
    IntEnergyComp, LinearComp, VarSpec,
};
use shellopt::shell::{ClampOrder, LoadCase, Material, PatchEdge, ShellPatch};
use shellopt::solver::NewtonSettings;
use shellopt::splines::{KnotVector, NurbsSurface};
use std::collections::BTreeMap;

/// Tensor-product patch over `x ∈ [x0, x1] × y ∈ [0, 1]` with a parabolic
/// arch profile `z = 0.3·x·(2 − x)` sampled at the control points.
fn arch_patch(x0: f64, x1: f64, nel_u: usize, nel_v: usize) -> ShellPatch {
    let ku = KnotVector::uniform(2, nel_u).unwrap();
    let kv = KnotVector::uniform(2, nel_v).unwrap();
    let gu = ku.greville();
    let gv = kv.greville();
    let mut cps = Vec::new();
    for &u in &gu {
        let x = x0 + u * (x1 - x0);
        for &v in &gv {
            cps.push([x, v, 0.3 * x * (2.0 - x)]);
        }
    }
    let n = gu.len() * gv.len();
    let surface = NurbsSurface::new(ku, kv, cps, vec![1.0; n]).unwrap();
    ShellPatch::new(surface, 0.05, Material::new(2.0e9, 0.0).unwrap()).unwrap()
}

/// Two non-conforming arch segments sharing the x = 1 edge, pinned at both
/// ends, under dead load.
fn arch_model() -> CoupledModel {
    let mut left = arch_patch(0.0, 1.0, 2, 2);
    let mut right = arch_patch(1.0, 2.0, 3, 2);
    left.fix_edge(PatchEdge::UMin, &[0, 1, 2], ClampOrder::Pinned);
    right.fix_edge(PatchEdge::UMax, &[0, 1, 2], ClampOrder::Pinned);
    for patch in [&mut left, &mut right] {
        patch
            .add_load(LoadCase::Dead {
                force_per_area: [0.0, 0.0, -100.0],
            })
            .unwrap();
    }
    let mut model = MultiPatchModel::new(vec![left, right]);
    model.detect_intersections(24).unwrap();
    assert_eq!(model.intersections.len(), 1);
    CoupledModel::new(model, 1e3).unwrap()
}

/// Converges to the assembly roundoff floor (≈2e-9 relative at this energy
/// scale) in two to three steps; anything tighter stalls on noise.
fn tight() -> NewtonSettings {
    NewtonSettings {
        rel_tol: 2e-8,
        abs_tol: 1e-12,
        max_iter: 30,
        ..NewtonSettings::default()
    }
}

/// FFD design chain over the arch's z-coordinates: lattice field →
/// stacked nodal values → fitted control points → displacement → energy.
struct FfdChain {
    graph: ComponentGraph,
    lattice_z: Vec<f64>,
}

fn build_ffd_chain() -> FfdChain {
    let model = arch_model();

    // Lattice enclosing the arch with a couple of z-layers of headroom.
    let block = make_ffd_block([2, 1, 1], 1, [-0.05, -0.05, -0.2], [2.05, 1.05, 0.5]).unwrap();
    let lattice_z: Vec<f64> = block.control_points().iter().map(|p| p[2]).collect();

    // Embed every patch's Lagrange nodes and stack the evaluation rows.
    let mut params = Vec::new();
    let mut extractions = Vec::new();
    for patch in &model.model.patches {
        let nodes = lagrange_nodes(patch.surface());
        let pts: Vec<[f64; 3]> = nodes
            .params()
            .iter()
            .map(|&(u, v)| patch.surface().eval(u, v))
            .collect();
        params.extend(embed_points(&block, &pts, "arch nodes").unwrap());
        extractions.push(build_extraction(patch.surface(), &nodes));
    }
    let ffd_matrix = build_ffd_matrix(&block, &params);
    let ext_refs: Vec<_> = extractions.iter().map(|e| e.matrix()).collect();
    let stacked = Fe2IgaComp::block_diag(&ext_refs);

    let shared = share(model);
    let mut graph = ComponentGraph::new();
    graph.add_component(Box::new(
        LinearComp::new(
            "ffd2surf",
            vec![VarSpec::new("CP_FFD_2", lattice_z.len())],
            "CP_L_2",
            vec![ffd_matrix],
            None,
        )
        .unwrap(),
    ));
    graph.add_component(Box::new(
        Fe2IgaComp::new("fe2iga", "CP_L_2", "CP_IGA_2", &stacked).unwrap(),
    ));
    graph.add_component(Box::new(
        DispComp::new("disp", shared.clone(), &[2], &["CP_IGA_2"], "d", tight()).unwrap(),
    ));
    graph.add_component(Box::new(
        IntEnergyComp::new("energy", shared, &[2], &["CP_IGA_2"], "d", "w_int").unwrap(),
    ));
    graph.add_design_var(DesignVar::free("CP_FFD_2", lattice_z.len()));
    graph.set_objective("w_int");
    FfdChain { graph, lattice_z }
}

fn design_point(chain: &FfdChain) -> BTreeMap<String, Vec<f64>> {
    let mut point = BTreeMap::new();
    point.insert("CP_FFD_2".to_string(), chain.lattice_z.clone());
    point
}

#[test]
fn ffd_chain_reproduces_baseline_at_initial_design() {
    // Independent baseline: solve the same model directly.
    let baseline = arch_model();
    let d_ref = baseline
        .solve(vec![0.0; baseline.ndof()], &tight())
        .unwrap()
        .d;
    let w_ref = baseline.energies(&d_ref).unwrap().0;
    let z_ref = field_values(&baseline, 2);

    let mut chain = build_ffd_chain();
    let vals = chain.graph.forward_eval(&design_point(&chain)).unwrap();

    // The lattice at its initial position reproduces the nodal
    // z-coordinates, the fit recovers the original control points, and the
    // displacement and energy match the direct solve.
    let z_chain = &vals["CP_IGA_2"];
    for (a, b) in z_chain.iter().zip(&z_ref) {
        assert!((a - b).abs() <= 1e-9, "fitted z {a} vs original {b}");
    }
    let d = &vals["d"];
    let dmax = d_ref.iter().map(|x| x.abs()).fold(0.0, f64::max);
    assert!(dmax > 1e-7, "arch did not deflect");
    for (a, b) in d.iter().zip(&d_ref) {
        assert!(
            (a - b).abs() <= 1e-7 * dmax,
            "chain displacement {a} vs baseline {b}"
        );
    }
    let w = vals["w_int"][0];
    assert!(w.is_finite() && w > 0.0);
    assert!((w - w_ref).abs() <= 1e-9 * w_ref.abs());
}

#[test]
fn ffd_chain_adjoint_gradient_matches_fd() {
    let mut chain = build_ffd_chain();
    chain.graph.forward_eval(&design_point(&chain)).unwrap();
    let totals = chain.graph.adjoint_total_derivatives(&["w_int"]).unwrap();
    let grad = totals.gradient("w_int").unwrap();
    let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    assert!(gnorm > 0.0, "gradient identically zero");

    // Central differences with the step tied to the model extent.  Each
    // evaluation rebuilds the chain so every inner solve is a cold start
    // along the same iteration path; reusing warm state would fold solver
    // history into the difference quotient.
    let objective = |point: &BTreeMap<String, Vec<f64>>| -> f64 {
        let mut fresh = build_ffd_chain();
        fresh.graph.forward_eval(point).unwrap()["w_int"][0]
    };
    // Step large enough that equilibrium-solve roundoff (~1e-14 in the
    // energy) stays below the difference quotient, small enough that the
    // quadratic truncation term (~(h/0.3)²) is negligible.
    let diameter = arch_model().model.diameter();
    let h = 1e-5 * diameter;
    let base = design_point(&chain);
    let mut checked = 0;
    for i in 0..grad.len() {
        if grad[i].abs() <= 1e-8 * gnorm {
            continue;
        }
        let mut plus = base.clone();
        plus.get_mut("CP_FFD_2").unwrap()[i] += h;
        let wp = objective(&plus);
        let mut minus = base.clone();
        minus.get_mut("CP_FFD_2").unwrap()[i] -= h;
        let wm = objective(&minus);
        let fd = (wp - wm) / (2.0 * h);
        let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs());
        assert!(
            rel <= 1e-5,
            "design dof {i}: adjoint {} vs FD {fd} (rel {rel:.2e})",
            grad[i]
        );
        checked += 1;
    }
    assert!(checked >= grad.len() / 2, "only {checked} dofs were active");
}

#[test]
fn ffd_chain_adjoint_matches_direct_mode() {
    let mut chain = build_ffd_chain();
    chain.graph.forward_eval(&design_point(&chain)).unwrap();
    let adj = chain.graph.adjoint_total_derivatives(&["w_int"]).unwrap();
    let dir = chain.graph.direct_total_derivatives(&["w_int"]).unwrap();
    let a = adj.block("w_int", "CP_FFD_2").unwrap();
    let b = dir.block("w_int", "CP_FFD_2").unwrap();
    let scale = a.amax().max(b.amax());
    for (x, y) in a.iter().zip(b.iter()) {
        assert!(
            (x - y).abs() <= 1e-10 * scale,
            "adjoint {x} vs direct {y}, scale {scale:.3e}"
        );
    }

    // One transpose solve per implicit component for the scalar seed —
    // the adjoint reuses each factorization instead of re-solving.
    let mut counts = chain.graph.adjoint_solve_counts();
    counts.sort();
    assert_eq!(
        counts,
        vec![("disp".to_string(), 1), ("fe2iga".to_string(), 1)]
    );
}

/// Plate crossed by a vertical web whose position is design-driven.
fn crossing_model() -> CoupledModel {
    fn biquadratic(corners: [[f64; 3]; 4], nel: (usize, usize)) -> NurbsSurface {
        let s = NurbsSurface::bilinear(corners[0], corners[1], corners[2], corners[3]);
        let s = shellopt::splines::elevate_degree(&s, 1, 1).unwrap().surface;
        let ku: Vec<f64> = (1..nel.0).map(|i| i as f64 / nel.0 as f64).collect();
        let kv: Vec<f64> = (1..nel.1).map(|i| i as f64 / nel.1 as f64).collect();
        shellopt::splines::refine_knots(&s, &ku, &kv).unwrap().surface
    }
    let mut flange = ShellPatch::new(
        biquadratic(
            [
                [0.0, 0.0, 0.0],
                [2.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [2.0, 1.0, 0.0],
            ],
            (2, 1),
        ),
        0.05,
        Material::new(1e9, 0.3).unwrap(),
    )
    .unwrap();
    flange.fix_edge(PatchEdge::UMin, &[0, 1, 2], ClampOrder::Clamped);
    flange
        .add_load(LoadCase::Dead {
            force_per_area: [0.0, 0.0, -200.0],
        })
        .unwrap();
    let mut web = ShellPatch::new(
        biquadratic(
            [
                [1.0, 0.0, -0.5],
                [1.0, 1.0, -0.5],
                [1.0, 0.0, 0.5],
                [1.0, 1.0, 0.5],
            ],
            (1, 1),
        ),
        0.05,
        Material::new(1e9, 0.3).unwrap(),
    )
    .unwrap();
    web.fix_edge(PatchEdge::VMin, &[0, 1, 2], ClampOrder::Pinned);
    let mut model = MultiPatchModel::new(vec![flange, web]);
    model.detect_intersections(32).unwrap();
    assert_eq!(model.intersections.len(), 1);
    assert_eq!(
        model.intersections[0].kind,
        IntersectionKind::Differentiable
    );
    CoupledModel::new(model, 1e3).unwrap()
}

fn crossing_gradient(track_intersections: bool) -> Vec<f64> {
    let model = crossing_model();
    let x0 = field_values(&model, 0);
    let z0 = field_values(&model, 2);
    let shared = share(model);
    let mut g = ComponentGraph::new();
    if track_intersections {
        g.add_component(Box::new(
            CpIga2XiComp::new("relocate", shared.clone(), &[0, 2], &["CP_0", "CP_2"], "xi")
                .unwrap(),
        ));
        g.add_component(Box::new(
            DispComp::with_intersections(
                "disp",
                shared.clone(),
                &[0, 2],
                &["CP_0", "CP_2"],
                "xi",
                "d",
                tight(),
            )
            .unwrap(),
        ));
    } else {
        g.add_component(Box::new(
            DispComp::new("disp", shared.clone(), &[0, 2], &["CP_0", "CP_2"], "d", tight())
                .unwrap(),
        ));
    }
    g.add_component(Box::new(
        IntEnergyComp::new("energy", shared, &[0, 2], &["CP_0", "CP_2"], "d", "w_int").unwrap(),
    ));
    g.add_design_var(DesignVar::free("CP_0", x0.len()));
    g.add_design_var(DesignVar::free("CP_2", z0.len()));
    let mut point = BTreeMap::new();
    point.insert("CP_0".to_string(), x0);
    point.insert("CP_2".to_string(), z0);
    g.forward_eval(&point).unwrap();
    let totals = g.adjoint_total_derivatives(&["w_int"]).unwrap();
    let block = totals.block("w_int", "CP_0").unwrap();
    block.row(0).iter().copied().collect()
}

#[test]
fn freezing_intersections_changes_web_position_gradient() {
    let tracked = crossing_gradient(true);
    let frozen = crossing_gradient(false);
    assert_eq!(tracked.len(), frozen.len());
    let scale = tracked.iter().map(|g| g.abs()).fold(0.0, f64::max);
    assert!(scale > 0.0);

    // Moving the web's x-control-points drags the interface across the
    // flange; dropping that pathway must visibly change their gradient.
    let ncp_flange = crossing_model().model.patches[0].surface().num_cps();
    let web_diff = tracked[ncp_flange..]
        .iter()
        .zip(&frozen[ncp_flange..])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(
        web_diff > 1e-6 * scale,
        "intersection pathway had no effect: {web_diff:.3e} vs scale {scale:.3e}"
    );
}
