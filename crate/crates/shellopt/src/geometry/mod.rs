//! Multipatch model management: Lagrange extraction, free-form-deformation
//! embedding with linear lattice constraints, and patch–patch intersection
//! discovery and classification.

mod extraction;
mod ffd;
mod intersect;

pub use extraction::{build_extraction, fit_control_points, lagrange_nodes, ExtractionMatrix, LagrangeNodes};
pub use ffd::{
    build_ffd_matrix, embed_points, ffd_constraints, make_ffd_block, ConstraintRow,
    FfdConstraint, FfdConstraints,
};
pub use intersect::{compute_intersections, refine_pairing, Intersection, IntersectionKind};

use crate::shell::ShellPatch;
use crate::{Error, Result};

/// Ordered collection of shell patches with their intersections.
#[derive(Debug, Clone)]
pub struct MultiPatchModel {
    pub patches: Vec<ShellPatch>,
    pub intersections: Vec<Intersection>,
}

impl MultiPatchModel {
    pub fn new(patches: Vec<ShellPatch>) -> Self {
        MultiPatchModel {
            patches,
            intersections: Vec::new(),
        }
    }

    /// Bounding-box diagonal over all patch control points.
    pub fn diameter(&self) -> f64 {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.patches {
            for cp in p.surface().control_points() {
                for k in 0..3 {
                    lo[k] = lo[k].min(cp[k]);
                    hi[k] = hi[k].max(cp[k]);
                }
            }
        }
        (0..3).map(|k| (hi[k] - lo[k]).powi(2)).sum::<f64>().sqrt()
    }

    /// Global displacement dof offset of each patch (prefix sums), plus the
    /// total as the last entry.
    pub fn dof_offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.patches.len() + 1);
        let mut acc = 0;
        out.push(0);
        for p in &self.patches {
            acc += p.ndof();
            out.push(acc);
        }
        out
    }

    pub fn ndof(&self) -> usize {
        self.patches.iter().map(|p| p.ndof()).sum()
    }

    /// Detect intersections among all patch pairs, replacing any stored
    /// ones.
    pub fn detect_intersections(&mut self, sampling_density: usize) -> Result<()> {
        let surfaces: Vec<_> = self.patches.iter().map(|p| p.surface().clone()).collect();
        self.intersections = compute_intersections(&surfaces, sampling_density)?;
        Ok(())
    }

    /// Register a manually specified intersection (override for geometry
    /// the tracer cannot handle); samples are refined and validated.
    pub fn add_intersection(&mut self, intersection: Intersection) -> Result<()> {
        self.validate_intersection(&intersection)?;
        self.intersections.push(intersection);
        Ok(())
    }

    fn validate_intersection(&self, ix: &Intersection) -> Result<()> {
        if ix.patch_a >= self.patches.len() || ix.patch_b >= self.patches.len() {
            return Err(Error::InvalidGeometry(format!(
                "intersection references patches ({}, {}) but the model has {}",
                ix.patch_a,
                ix.patch_b,
                self.patches.len()
            )));
        }
        let diam = self.diameter();
        let sa = self.patches[ix.patch_a].surface();
        let sb = self.patches[ix.patch_b].surface();
        for (pa, pb) in ix.para_coords_a.iter().zip(&ix.para_coords_b) {
            let xa = sa.eval(pa.0, pa.1);
            let xb = sb.eval(pb.0, pb.1);
            let gap: f64 = (0..3).map(|k| (xa[k] - xb[k]).powi(2)).sum::<f64>().sqrt();
            if gap > 1e-8 * diam {
                return Err(Error::IntersectionFailed(format!(
                    "paired samples disagree by {gap:.3e} (> 1e-8 x diameter {diam:.3e})"
                )));
            }
        }
        Ok(())
    }
}
