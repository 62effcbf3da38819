//! Patch–patch intersection discovery: dense parametric sampling, signed
//! distance marching for transversal crossings, direct edge scans for
//! touching boundaries, closest-point refinement and classification.

use std::collections::BTreeMap;

use crate::splines::NurbsSurface;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

pub const DEFAULT_MORTAR_RESOLUTION: usize = 2;

fn default_mortar() -> usize {
    DEFAULT_MORTAR_RESOLUTION
}

/// How an intersection may move during shape updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntersectionKind {
    /// Confined to boundary edges of both patches; its parametric location
    /// never changes.
    EdgeFixed,
    /// At least partly interior to one patch; its parametric location moves
    /// with the geometry.
    Differentiable,
}

/// A traced intersection curve between two patches: ordered parametric
/// samples that map to the same physical points on either side.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Intersection {
    pub patch_a: usize,
    pub patch_b: usize,
    pub para_coords_a: Vec<(f64, f64)>,
    pub para_coords_b: Vec<(f64, f64)>,
    pub kind: IntersectionKind,
    /// Quadrature-mesh elements per spline element along the curve.
    #[serde(default = "default_mortar")]
    pub mortar_resolution: usize,
}

impl Intersection {
    pub fn new(
        patch_a: usize,
        patch_b: usize,
        para_coords_a: Vec<(f64, f64)>,
        para_coords_b: Vec<(f64, f64)>,
        kind: IntersectionKind,
    ) -> Result<Self> {
        if para_coords_a.len() != para_coords_b.len() {
            return Err(Error::IntersectionFailed(format!(
                "sample counts differ: {} on patch {} vs {} on patch {}",
                para_coords_a.len(),
                patch_a,
                para_coords_b.len(),
                patch_b
            )));
        }
        if para_coords_a.len() < 2 {
            return Err(Error::IntersectionFailed(
                "an intersection needs at least two samples".into(),
            ));
        }
        Ok(Intersection {
            patch_a,
            patch_b,
            para_coords_a,
            para_coords_b,
            kind,
            mortar_resolution: DEFAULT_MORTAR_RESOLUTION,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.para_coords_a.len()
    }
}

/// Dense parametric sample grid of one surface.
struct SampleGrid {
    n: usize,
    us: Vec<f64>,
    vs: Vec<f64>,
    pts: Vec<[f64; 3]>,
}

impl SampleGrid {
    fn build(s: &NurbsSurface, n: usize) -> Self {
        let (ua, ub) = s.knots_u().domain();
        let (va, vb) = s.knots_v().domain();
        let lin = |a: f64, b: f64, i: usize| a + (b - a) * i as f64 / (n - 1) as f64;
        let us: Vec<f64> = (0..n).map(|i| lin(ua, ub, i)).collect();
        let vs: Vec<f64> = (0..n).map(|j| lin(va, vb, j)).collect();
        let mut pts = Vec::with_capacity(n * n);
        for &u in &us {
            for &v in &vs {
                pts.push(s.eval(u, v));
            }
        }
        SampleGrid { n, us, vs, pts }
    }

    /// Parameters of the stored sample nearest to `x`.
    fn nearest(&self, x: [f64; 3]) -> (f64, f64) {
        let mut best = (0usize, f64::INFINITY);
        for (i, p) in self.pts.iter().enumerate() {
            let d = dist2(*p, x);
            if d < best.1 {
                best = (i, d);
            }
        }
        (self.us[best.0 / self.n], self.vs[best.0 % self.n])
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn bbox(s: &NurbsSurface) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in s.control_points() {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (lo, hi)
}

fn model_diameter(surfaces: &[NurbsSurface]) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for s in surfaces {
        let (l, h) = bbox(s);
        for k in 0..3 {
            lo[k] = lo[k].min(l[k]);
            hi[k] = hi[k].max(h[k]);
        }
    }
    (0..3).map(|k| (hi[k] - lo[k]).powi(2)).sum::<f64>().sqrt()
}

fn bboxes_overlap(a: &NurbsSurface, b: &NurbsSurface, pad: f64) -> bool {
    let (la, ha) = bbox(a);
    let (lb, hb) = bbox(b);
    (0..3).all(|k| la[k] - pad <= hb[k] && lb[k] - pad <= ha[k])
}

/// Refine an approximate intersection point: move `(u, v)` on `a` until its
/// closest-point projection onto `b` coincides with it. Returns the refined
/// parameters on both patches and the final gap.
///
/// A Newton step on the signed normal distance is used while the projection
/// is transversal; when the projection clamps to a boundary (or the normal
/// component degenerates) a Gauss–Newton step on the frozen projected point
/// takes over, which reduces to alternating closest-point projections.
pub fn refine_pairing(
    a: &NurbsSurface,
    b: &NurbsSurface,
    start_a: (f64, f64),
    seed_b: (f64, f64),
    tol: f64,
    max_iter: usize,
) -> Result<((f64, f64), (f64, f64), f64)> {
    let (ua, ub) = a.knots_u().domain();
    let (va, vb) = a.knots_v().domain();
    let (mut u, mut v) = (start_a.0.clamp(ua, ub), start_a.1.clamp(va, vb));
    let mut seed = seed_b;
    let mut gap = f64::INFINITY;
    for _ in 0..max_iter {
        let jet = a.jet2(u, v);
        let xi_b = b.invert_point(jet.x, seed, 1e-13, 80)?;
        seed = xi_b;
        let xb = b.eval(xi_b.0, xi_b.1);
        let r = [jet.x[0] - xb[0], jet.x[1] - xb[1], jet.x[2] - xb[2]];
        gap = dist2(jet.x, xb).sqrt();
        if gap <= tol {
            return Ok(((u, v), xi_b, gap));
        }
        let nb = b.unit_normal(xi_b.0, xi_b.1);
        let phi = dot(r, nb);
        let (du, dv) = if phi.abs() >= 0.5 * gap {
            // Transversal regime: drive the signed normal distance to zero.
            let g = [dot(jet.du, nb), dot(jet.dv, nb)];
            let g2 = g[0] * g[0] + g[1] * g[1];
            if g2 < 1e-30 {
                break;
            }
            (-phi * g[0] / g2, -phi * g[1] / g2)
        } else {
            // Clamped / tangential regime: Gauss–Newton towards the frozen
            // projected point.
            let (a11, a12, a22) = (
                dot(jet.du, jet.du),
                dot(jet.du, jet.dv),
                dot(jet.dv, jet.dv),
            );
            let (g1, g2v) = (dot(jet.du, r), dot(jet.dv, r));
            let det = a11 * a22 - a12 * a12;
            if det.abs() < 1e-30 {
                break;
            }
            (
                -(a22 * g1 - a12 * g2v) / det,
                -(a11 * g2v - a12 * g1) / det,
            )
        };
        let (nu, nv) = ((u + du).clamp(ua, ub), (v + dv).clamp(va, vb));
        if (nu - u).abs() <= 1e-15 * (ub - ua) && (nv - v).abs() <= 1e-15 * (vb - va) {
            break;
        }
        u = nu;
        v = nv;
    }
    if gap <= tol {
        let xi_b = b.invert_point(a.eval(u, v), seed, 1e-13, 80)?;
        return Ok(((u, v), xi_b, gap));
    }
    Err(Error::IntersectionFailed(format!(
        "closest-point refinement stalled at gap {gap:.3e} near (u, v) = \
         ({u:.4}, {v:.4}); consider specifying this intersection manually"
    )))
}

/// One traced curve before packaging: paired parameter lists plus the
/// physical midside samples used for de-duplication.
struct Curve {
    para_a: Vec<(f64, f64)>,
    para_b: Vec<(f64, f64)>,
    phys: Vec<[f64; 3]>,
}

/// Fraction of `pts` lying within `tol` of the polyline `poly`.
fn coverage(pts: &[[f64; 3]], poly: &[[f64; 3]], tol: f64) -> f64 {
    if poly.len() < 2 {
        return 0.0;
    }
    let mut hit = 0usize;
    for &p in pts {
        let mut dmin = f64::INFINITY;
        for w in poly.windows(2) {
            dmin = dmin.min(point_segment_dist2(p, w[0], w[1]));
        }
        if dmin.sqrt() <= tol {
            hit += 1;
        }
    }
    hit as f64 / pts.len() as f64
}

fn point_segment_dist2(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let denom = dot(ab, ab);
    let t = if denom > 0.0 {
        (dot(ab, ap) / denom).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]];
    dist2(p, q)
}

/// Edge-scan: runs of samples along the four boundary edges of `a` that lie
/// on `b` (touching curves produce no sign change and need this path).
fn edge_touch_curves(
    a: &NurbsSurface,
    b: &NurbsSurface,
    grid_b: &SampleGrid,
    n: usize,
    tol_touch: f64,
) -> Vec<Curve> {
    let (ua, ub) = a.knots_u().domain();
    let (va, vb) = a.knots_v().domain();
    let mut curves = Vec::new();
    for edge in 0..4 {
        let param_at = |t: f64| -> (f64, f64) {
            match edge {
                0 => (ua + t * (ub - ua), va),
                1 => (ua + t * (ub - ua), vb),
                2 => (ua, va + t * (vb - va)),
                _ => (ub, va + t * (vb - va)),
            }
        };
        let mut run: Vec<((f64, f64), (f64, f64), [f64; 3])> = Vec::new();
        let flush = |run: &mut Vec<((f64, f64), (f64, f64), [f64; 3])>,
                     curves: &mut Vec<Curve>| {
            if run.len() >= 2 {
                curves.push(Curve {
                    para_a: run.iter().map(|s| s.0).collect(),
                    para_b: run.iter().map(|s| s.1).collect(),
                    phys: run.iter().map(|s| s.2).collect(),
                });
            }
            run.clear();
        };
        for i in 0..n {
            let t = i as f64 / (n - 1) as f64;
            let (u, v) = param_at(t);
            let x = a.eval(u, v);
            let seed = grid_b.nearest(x);
            let hit = b
                .invert_point(x, seed, 1e-13, 80)
                .ok()
                .map(|xi| (xi, b.eval(xi.0, xi.1)))
                .filter(|(_, xb)| dist2(x, *xb).sqrt() <= tol_touch);
            match hit {
                Some((xi, _)) => run.push(((u, v), xi, x)),
                None => flush(&mut run, &mut curves),
            }
        }
        flush(&mut run, &mut curves);
    }
    curves
}

/// Key of a grid edge carrying a sign crossing: (0 = u-direction edge,
/// 1 = v-direction edge, i, j) with (i, j) the lower-index node.
type EdgeKey = (u8, usize, usize);

/// Marching squares on the signed distance from `a`'s sample grid to `b`,
/// traced into ordered chains and refined by closest-point iteration.
fn marching_curves(
    a: &NurbsSurface,
    b: &NurbsSurface,
    grid_a: &SampleGrid,
    grid_b: &SampleGrid,
    diam: f64,
) -> Result<Vec<Curve>> {
    let n = grid_a.n;
    // Signed distance and projection seed per grid node.
    let mut phi = vec![f64::NAN; n * n];
    let mut dist = vec![f64::INFINITY; n * n];
    let mut proj = vec![(0.0f64, 0.0f64); n * n];
    for i in 0..n {
        for j in 0..n {
            let x = grid_a.pts[i * n + j];
            let seed = grid_b.nearest(x);
            if let Ok(xi) = b.invert_point(x, seed, 1e-12, 60) {
                let xb = b.eval(xi.0, xi.1);
                let nb = b.unit_normal(xi.0, xi.1);
                let r = [x[0] - xb[0], x[1] - xb[1], x[2] - xb[2]];
                phi[i * n + j] = dot(r, nb);
                dist[i * n + j] = dist2(x, xb).sqrt();
                proj[i * n + j] = xi;
            }
        }
    }

    let noise_floor = 1e-10 * diam;
    // Crossing points on grid edges, keyed deterministically.
    let mut crossings: BTreeMap<EdgeKey, (f64, f64)> = BTreeMap::new();
    let mut segments: Vec<(EdgeKey, EdgeKey)> = Vec::new();

    let node_phi = |i: usize, j: usize| phi[i * n + j];
    let classify = |p: f64| p >= 0.0;
    let cross_param = |key: EdgeKey| -> (f64, f64) {
        let (dir, i, j) = key;
        let (p0, p1) = if dir == 0 {
            (node_phi(i, j), node_phi(i + 1, j))
        } else {
            (node_phi(i, j), node_phi(i, j + 1))
        };
        let denom = p0 - p1;
        let t = if denom.abs() > 0.0 {
            (p0 / denom).clamp(0.0, 1.0)
        } else {
            0.5
        };
        if dir == 0 {
            (
                grid_a.us[i] + t * (grid_a.us[i + 1] - grid_a.us[i]),
                grid_a.vs[j],
            )
        } else {
            (
                grid_a.us[i],
                grid_a.vs[j] + t * (grid_a.vs[j + 1] - grid_a.vs[j]),
            )
        }
    };

    for i in 0..n - 1 {
        for j in 0..n - 1 {
            let corners = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)];
            if corners.iter().any(|&(ci, cj)| !node_phi(ci, cj).is_finite()) {
                continue;
            }
            // Near-field gate: the curve must pass close to this cell.
            let cell_len = {
                let p = |ci: usize, cj: usize| grid_a.pts[ci * n + cj];
                dist2(p(i, j), p(i + 1, j))
                    .max(dist2(p(i, j), p(i, j + 1)))
                    .sqrt()
            };
            let dmin = corners
                .iter()
                .map(|&(ci, cj)| dist[ci * n + cj])
                .fold(f64::INFINITY, f64::min);
            if dmin > 4.0 * cell_len {
                continue;
            }
            let pmax = corners
                .iter()
                .map(|&(ci, cj)| node_phi(ci, cj).abs())
                .fold(0.0f64, f64::max);
            if pmax <= noise_floor {
                continue; // touching region, not a crossing
            }
            let s: Vec<bool> = corners
                .iter()
                .map(|&(ci, cj)| classify(node_phi(ci, cj)))
                .collect();
            // Cell edges: bottom (u-dir at j), right (v-dir at i+1),
            // top (u-dir at j+1), left (v-dir at i).
            let edges: [EdgeKey; 4] = [
                (0, i, j),
                (1, i + 1, j),
                (0, i, j + 1),
                (1, i, j),
            ];
            let crossed = [s[0] != s[1], s[1] != s[2], s[3] != s[2], s[0] != s[3]];
            let hits: Vec<usize> = (0..4).filter(|&e| crossed[e]).collect();
            let mut connect = |e1: usize, e2: usize, segments: &mut Vec<(EdgeKey, EdgeKey)>| {
                for &e in &[e1, e2] {
                    crossings
                        .entry(edges[e])
                        .or_insert_with(|| cross_param(edges[e]));
                }
                segments.push((edges[e1], edges[e2]));
            };
            match hits.len() {
                2 => connect(hits[0], hits[1], &mut segments),
                4 => {
                    // Saddle: disambiguate with the mean corner value.
                    let mean: f64 = corners
                        .iter()
                        .map(|&(ci, cj)| node_phi(ci, cj))
                        .sum::<f64>()
                        / 4.0;
                    if classify(mean) == s[0] {
                        connect(0, 1, &mut segments);
                        connect(2, 3, &mut segments);
                    } else {
                        connect(0, 3, &mut segments);
                        connect(1, 2, &mut segments);
                    }
                }
                _ => {}
            }
        }
    }

    // Chain segments into polylines.
    let mut adjacency: BTreeMap<EdgeKey, Vec<usize>> = BTreeMap::new();
    for (si, &(e1, e2)) in segments.iter().enumerate() {
        adjacency.entry(e1).or_default().push(si);
        adjacency.entry(e2).or_default().push(si);
    }
    let mut seg_used = vec![false; segments.len()];
    let mut chains: Vec<Vec<EdgeKey>> = Vec::new();
    // Open chains start at degree-1 crossings; remaining segments form loops.
    let mut starts: Vec<EdgeKey> = adjacency
        .iter()
        .filter(|(_, segs)| segs.len() == 1)
        .map(|(&k, _)| k)
        .collect();
    starts.extend(adjacency.keys().copied());
    for start in starts {
        let mut node = start;
        let mut chain = vec![node];
        loop {
            let next_seg = adjacency[&node]
                .iter()
                .copied()
                .find(|&si| !seg_used[si]);
            let Some(si) = next_seg else { break };
            seg_used[si] = true;
            let (e1, e2) = segments[si];
            node = if e1 == node { e2 } else { e1 };
            chain.push(node);
        }
        if chain.len() >= 2 {
            chains.push(chain);
        }
    }

    // Refine each chain vertex onto the true intersection.
    let tol_refine = 1e-10 * diam;
    let pair_tol = 1e-8 * diam;
    let mut curves = Vec::new();
    for chain in chains {
        let raw_len = chain.len();
        let mut curve = Curve {
            para_a: Vec::new(),
            para_b: Vec::new(),
            phys: Vec::new(),
        };
        let mut hard_failure = false;
        for key in chain {
            let (u0, v0) = crossings[&key];
            let seed = {
                let (_, i, j) = key;
                proj[i * n + j]
            };
            match refine_pairing(a, b, (u0, v0), seed, tol_refine, 60) {
                Ok((xi_a, xi_b, gap)) if gap <= pair_tol => {
                    curve.para_a.push(xi_a);
                    curve.para_b.push(xi_b);
                    curve.phys.push(a.eval(xi_a.0, xi_a.1));
                }
                Ok(_) => {}
                Err(_) => {
                    // Stalled at finite distance: either marching noise (a
                    // short fragment, dropped) or a genuine curve the
                    // refinement cannot pin down (reported below).
                    if raw_len >= 8 {
                        hard_failure = true;
                    }
                }
            }
        }
        if curve.para_a.len() >= 2 {
            curves.push(curve);
        } else if hard_failure {
            return Err(Error::IntersectionFailed(
                "closest-point refinement failed along a traced curve; \
                 consider specifying this intersection manually"
                    .into(),
            ));
        }
    }
    Ok(curves)
}

fn confined_to_boundary(params: &[(f64, f64)], s: &NurbsSurface) -> bool {
    let (ua, ub) = s.knots_u().domain();
    let (va, vb) = s.knots_v().domain();
    let (tu, tv) = (1e-6 * (ub - ua), 1e-6 * (vb - va));
    params.iter().all(|&(u, v)| {
        u - ua <= tu || ub - u <= tu || v - va <= tv || vb - v <= tv
    })
}

/// Discover all intersections among `surfaces` by dense sampling at
/// `sampling_density` points per parametric direction (64 is the customary
/// default), pairing samples across patches to within 1e-8 of the model
/// diameter.
pub fn compute_intersections(
    surfaces: &[NurbsSurface],
    sampling_density: usize,
) -> Result<Vec<Intersection>> {
    let n = sampling_density.max(8);
    let diam = model_diameter(surfaces);
    if !(diam > 0.0) {
        return Ok(Vec::new());
    }
    let grids: Vec<SampleGrid> = surfaces.iter().map(|s| SampleGrid::build(s, n)).collect();
    let tol_touch = 1e-9 * diam;
    let cover_tol = 2e-3 * diam;

    let mut out = Vec::new();
    for ia in 0..surfaces.len() {
        for ib in ia + 1..surfaces.len() {
            let (a, b) = (&surfaces[ia], &surfaces[ib]);
            if !bboxes_overlap(a, b, 1e-6 * diam) {
                continue;
            }
            let mut accepted: Vec<Curve> = Vec::new();
            let mut swapped: Vec<bool> = Vec::new();

            // Touching boundaries first (shared edges, T-junctions seen
            // from the edge side) ...
            for c in edge_touch_curves(a, b, &grids[ib], n, tol_touch) {
                if accepted
                    .iter()
                    .all(|acc| coverage(&c.phys, &acc.phys, cover_tol) < 0.8)
                {
                    accepted.push(c);
                    swapped.push(false);
                }
            }
            for c in edge_touch_curves(b, a, &grids[ia], n, tol_touch) {
                if accepted
                    .iter()
                    .all(|acc| coverage(&c.phys, &acc.phys, cover_tol) < 0.8)
                {
                    accepted.push(c);
                    swapped.push(true);
                }
            }
            // ... then transversal crossings through `a`'s interior.
            for c in marching_curves(a, b, &grids[ia], &grids[ib], diam)? {
                if accepted
                    .iter()
                    .all(|acc| coverage(&c.phys, &acc.phys, cover_tol) < 0.8)
                {
                    accepted.push(c);
                    swapped.push(false);
                }
            }

            for (c, sw) in accepted.into_iter().zip(swapped) {
                let (para_a, para_b) = if sw {
                    (c.para_b, c.para_a)
                } else {
                    (c.para_a, c.para_b)
                };
                let kind = if confined_to_boundary(&para_a, a)
                    && confined_to_boundary(&para_b, b)
                {
                    IntersectionKind::EdgeFixed
                } else {
                    IntersectionKind::Differentiable
                };
                out.push(Intersection {
                    patch_a: ia,
                    patch_b: ib,
                    para_coords_a: para_a,
                    para_coords_b: para_b,
                    kind,
                    mortar_resolution: DEFAULT_MORTAR_RESOLUTION,
                });
            }
        }
    }
    Ok(out)
}
