//! Free-form-deformation embedding: an axis-aligned B-spline block whose
//! lattice carries the design variables, the constant evaluation matrix
//! tying embedded nodes to the lattice, and linear lattice constraints.

use crate::solver::{CscMatrix, Triplets};
use crate::splines::{BsplineVolume, KnotVector};
use crate::{Error, Result};

/// Uniform open-knot block of the given degree whose Greville lattice maps
/// the parametric cube onto `[min, max]` as the identity.
pub fn make_ffd_block(
    nel: [usize; 3],
    degree: usize,
    min: [f64; 3],
    max: [f64; 3],
) -> Result<BsplineVolume> {
    for k in 0..3 {
        if nel[k] == 0 {
            return Err(Error::InvalidGeometry(format!(
                "FFD block needs at least one element per direction, got {nel:?}"
            )));
        }
        if !(max[k] - min[k] > 0.0) || !min[k].is_finite() || !max[k].is_finite() {
            return Err(Error::InvalidGeometry(format!(
                "degenerate FFD bounds along axis {k}: [{}, {}]",
                min[k], max[k]
            )));
        }
    }
    let ku = KnotVector::uniform(degree, nel[0])?;
    let kv = KnotVector::uniform(degree, nel[1])?;
    let kw = KnotVector::uniform(degree, nel[2])?;
    BsplineVolume::greville_box(ku, kv, kw, min, max)
}

/// Axis-aligned bounds of the block's control lattice (equals the box the
/// identity map covers).
fn lattice_bounds(block: &BsplineVolume) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in block.control_points() {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (lo, hi)
}

/// Parametric coordinates of physical points inside the (identity-mapped)
/// block: the closed-form affine rescale per axis. `label` names the point
/// set in error messages.
pub fn embed_points(
    block: &BsplineVolume,
    points: &[[f64; 3]],
    label: &str,
) -> Result<Vec<[f64; 3]>> {
    let (lo, hi) = lattice_bounds(block);
    let (ku, kv, kw) = block.knots();
    let domains = [ku.domain(), kv.domain(), kw.domain()];
    let mut out = Vec::with_capacity(points.len());
    for (idx, x) in points.iter().enumerate() {
        let mut p = [0.0; 3];
        for k in 0..3 {
            let extent = hi[k] - lo[k];
            let tol = 1e-9 * extent;
            if x[k] < lo[k] - tol || x[k] > hi[k] + tol {
                return Err(Error::InvalidGeometry(format!(
                    "{label}: point {idx} at {x:?} lies outside the FFD block \
                     bounds [{:?}, {:?}] along axis {k}",
                    lo, hi
                )));
            }
            let t = ((x[k] - lo[k]) / extent).clamp(0.0, 1.0);
            let (a, b) = domains[k];
            p[k] = a + t * (b - a);
        }
        out.push(p);
    }
    Ok(out)
}

/// Sparse evaluation matrix `A` with `A . P_FFD = embedded point positions`;
/// one row per point, `(degree+1)^3` entries each. The matrix depends only
/// on the parametric embedding and stays constant while the lattice moves.
pub fn build_ffd_matrix(block: &BsplineVolume, params: &[[f64; 3]]) -> CscMatrix {
    let mut t = Triplets::new(params.len(), block.num_cps());
    for (row, p) in params.iter().enumerate() {
        let (idx, vals) = block.basis_row(p[0], p[1], p[2]);
        for (j, v) in idx.into_iter().zip(vals) {
            t.push(row, j, v);
        }
    }
    t.into_csc()
}

/// Lattice constraint specification.
#[derive(Debug, Clone)]
pub enum FfdConstraint {
    /// Tie every control point along `direction` to the first point of its
    /// lattice line, in both transverse coordinate fields, so the lattice
    /// stays prismatic along that direction.
    Align { direction: usize },
    /// Fix the listed coordinate fields of a lattice face (`dir0`, `side0`)
    /// — or of its edge when a second direction/side pair is given — to
    /// their initial values.
    Pin {
        dir0: usize,
        side0: usize,
        dir1: Option<(usize, usize)>,
        fields: Vec<usize>,
    },
    /// Require consecutive control points along `direction` to keep a gap
    /// of at least `min_gap` in each listed field, preventing lattice
    /// self-penetration.
    Regu {
        direction: usize,
        fields: Vec<usize>,
        min_gap: f64,
    },
}

/// One linear row over a single coordinate field of the flattened lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintRow {
    pub field: usize,
    /// `(flat lattice index, coefficient)` pairs.
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl ConstraintRow {
    pub fn evaluate(&self, block: &BsplineVolume) -> f64 {
        self.terms
            .iter()
            .map(|&(i, c)| c * block.control_points()[i][self.field])
            .sum::<f64>()
    }
}

/// Assembled lattice constraints: `terms . P_field = rhs` for equalities,
/// `terms . P_field >= rhs` for inequalities.
#[derive(Debug, Clone, Default)]
pub struct FfdConstraints {
    pub equalities: Vec<ConstraintRow>,
    pub inequalities: Vec<ConstraintRow>,
}

fn dims_of(block: &BsplineVolume) -> [usize; 3] {
    let (a, b, c) = block.dims();
    [a, b, c]
}

fn flat(block: &BsplineVolume, idx: [usize; 3]) -> usize {
    block.cp_index(idx[0], idx[1], idx[2])
}

/// Indices of the lattice line through `base` along `direction`.
fn line_indices(block: &BsplineVolume, direction: usize, mut base: [usize; 3]) -> Vec<usize> {
    let n = dims_of(block)[direction];
    (0..n)
        .map(|s| {
            base[direction] = s;
            flat(block, base)
        })
        .collect()
}

/// All lines along `direction`, enumerated over the transverse indices.
fn lines_along(block: &BsplineVolume, direction: usize) -> Vec<Vec<usize>> {
    let dims = dims_of(block);
    let (t0, t1) = match direction {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let mut out = Vec::with_capacity(dims[t0] * dims[t1]);
    for a in 0..dims[t0] {
        for b in 0..dims[t1] {
            let mut base = [0; 3];
            base[t0] = a;
            base[t1] = b;
            out.push(line_indices(block, direction, base));
        }
    }
    out
}

fn check_direction(direction: usize) -> Result<()> {
    if direction > 2 {
        return Err(Error::InvalidGeometry(format!(
            "lattice direction {direction} out of range 0..3"
        )));
    }
    Ok(())
}

fn check_fields(fields: &[usize]) -> Result<()> {
    if fields.is_empty() || fields.iter().any(|&f| f > 2) {
        return Err(Error::InvalidGeometry(format!(
            "constraint fields {fields:?} must be a non-empty subset of {{0,1,2}}"
        )));
    }
    Ok(())
}

/// Translate constraint specs into linear rows over the lattice and verify
/// the initial lattice satisfies them; violated rows indicate a
/// contradictory specification and fail construction.
pub fn ffd_constraints(
    block: &BsplineVolume,
    specs: &[FfdConstraint],
) -> Result<FfdConstraints> {
    let dims = dims_of(block);
    let mut out = FfdConstraints::default();
    for spec in specs {
        match spec {
            FfdConstraint::Align { direction } => {
                check_direction(*direction)?;
                let fields: Vec<usize> = (0..3).filter(|f| f != direction).collect();
                for line in lines_along(block, *direction) {
                    let leader = line[0];
                    for &follower in &line[1..] {
                        for &f in &fields {
                            out.equalities.push(ConstraintRow {
                                field: f,
                                terms: vec![(follower, 1.0), (leader, -1.0)],
                                rhs: 0.0,
                            });
                        }
                    }
                }
            }
            FfdConstraint::Pin {
                dir0,
                side0,
                dir1,
                fields,
            } => {
                check_direction(*dir0)?;
                check_fields(fields)?;
                let mut selectors = vec![(*dir0, *side0)];
                if let Some((d1, s1)) = dir1 {
                    check_direction(*d1)?;
                    if d1 == dir0 {
                        return Err(Error::InvalidGeometry(
                            "pin edge directions must differ".into(),
                        ));
                    }
                    selectors.push((*d1, *s1));
                }
                for &(_, s) in &selectors {
                    if s > 1 {
                        return Err(Error::InvalidGeometry(format!(
                            "pin side {s} must be 0 or 1"
                        )));
                    }
                }
                let side_index = |d: usize, s: usize| if s == 0 { 0 } else { dims[d] - 1 };
                for i in 0..dims[0] {
                    for j in 0..dims[1] {
                        for k in 0..dims[2] {
                            let idx = [i, j, k];
                            if selectors.iter().all(|&(d, s)| idx[d] == side_index(d, s)) {
                                let fl = flat(block, idx);
                                for &f in fields {
                                    out.equalities.push(ConstraintRow {
                                        field: f,
                                        terms: vec![(fl, 1.0)],
                                        rhs: block.control_points()[fl][f],
                                    });
                                }
                            }
                        }
                    }
                }
            }
            FfdConstraint::Regu {
                direction,
                fields,
                min_gap,
            } => {
                check_direction(*direction)?;
                check_fields(fields)?;
                if !(*min_gap >= 0.0) || !min_gap.is_finite() {
                    return Err(Error::InvalidGeometry(format!(
                        "regularization gap {min_gap} must be finite and non-negative"
                    )));
                }
                for line in lines_along(block, *direction) {
                    for pair in line.windows(2) {
                        for &f in fields {
                            out.inequalities.push(ConstraintRow {
                                field: f,
                                terms: vec![(pair[1], 1.0), (pair[0], -1.0)],
                                rhs: *min_gap,
                            });
                        }
                    }
                }
            }
        }
    }

    let (lo, hi) = lattice_bounds(block);
    let diag = (0..3).map(|k| (hi[k] - lo[k]).powi(2)).sum::<f64>().sqrt();
    let tol = 1e-9 * diag;
    for row in &out.equalities {
        let r = row.evaluate(block) - row.rhs;
        if r.abs() > tol {
            return Err(Error::InvalidGeometry(format!(
                "infeasible constraint specification: equality row on field {} \
                 violated by {r:.3e} at the initial lattice",
                row.field
            )));
        }
    }
    for row in &out.inequalities {
        let r = row.evaluate(block) - row.rhs;
        if r < -tol {
            return Err(Error::InvalidGeometry(format!(
                "infeasible constraint specification: inequality row on field {} \
                 violated by {:.3e} at the initial lattice",
                row.field, -r
            )));
        }
    }
    Ok(out)
}
