//! Versioned JSON interchange documents: multipatch geometry and the
//! problem configuration driving analysis and optimization. Parse errors
//! and semantic violations carry a JSON pointer to the offending value.

use crate::geometry::{Intersection, IntersectionKind, MultiPatchModel};
use crate::shell::{ClampOrder, LoadCase, PatchEdge};
use crate::splines::{KnotVector, NurbsSurface};
use crate::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Current schema version of both document kinds.
pub const DOCUMENT_VERSION: u32 = 1;

fn doc_err(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Document {
        path: path.into(),
        message: message.into(),
    }
}

/// Render a `serde_path_to_error` path as a JSON pointer.
fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for segment in path.iter() {
        match segment {
            Segment::Seq { index } => {
                out.push('/');
                out.push_str(&index.to_string());
            }
            Segment::Map { key } | Segment::Enum { variant: key } => {
                out.push('/');
                out.push_str(key);
            }
            Segment::Unknown => {}
        }
    }
    out
}

fn parse_document<T: DeserializeOwned>(text: &str) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(&mut de)
        .map_err(|e| doc_err(json_pointer(e.path()), e.inner().to_string()))
}

fn check_finite(values: &[f64], path: &str) -> Result<()> {
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(doc_err(format!("{path}/{i}"), format!("non-finite value {v}")));
        }
    }
    Ok(())
}

fn check_version(version: u32, what: &str) -> Result<()> {
    if version != DOCUMENT_VERSION {
        return Err(doc_err(
            "/version",
            format!("unsupported {what} document version {version}, expected {DOCUMENT_VERSION}"),
        ));
    }
    Ok(())
}

/// One NURBS patch. Control points and weights are stored row-major with
/// the `u` index outermost: entry `(i, j)` lives at `i * nv + j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchRecord {
    pub degrees: [usize; 2],
    pub knots_u: Vec<f64>,
    pub knots_v: Vec<f64>,
    pub control_points: Vec<[f64; 3]>,
    /// Omitted weights default to 1 (a polynomial B-spline patch).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl PatchRecord {
    pub fn from_surface(surface: &NurbsSurface) -> Self {
        let weights = surface.weights();
        PatchRecord {
            degrees: [surface.knots_u().degree(), surface.knots_v().degree()],
            knots_u: surface.knots_u().knots().to_vec(),
            knots_v: surface.knots_v().knots().to_vec(),
            control_points: surface.control_points().to_vec(),
            weights: if weights.iter().all(|&w| w == 1.0) {
                None
            } else {
                Some(weights.to_vec())
            },
        }
    }

    /// Build the surface, reporting violations against `pointer` (the
    /// patch's own JSON pointer).
    pub fn surface_at(&self, pointer: &str) -> Result<NurbsSurface> {
        check_finite(&self.knots_u, &format!("{pointer}/knots_u"))?;
        check_finite(&self.knots_v, &format!("{pointer}/knots_v"))?;
        let ku = KnotVector::new(self.degrees[0], self.knots_u.clone())
            .map_err(|e| doc_err(format!("{pointer}/knots_u"), e.to_string()))?;
        let kv = KnotVector::new(self.degrees[1], self.knots_v.clone())
            .map_err(|e| doc_err(format!("{pointer}/knots_v"), e.to_string()))?;
        let n = ku.num_basis() * kv.num_basis();
        for (i, p) in self.control_points.iter().enumerate() {
            check_finite(p, &format!("{pointer}/control_points/{i}"))?;
        }
        let weights = match &self.weights {
            Some(w) => {
                check_finite(w, &format!("{pointer}/weights"))?;
                if w.len() != n {
                    return Err(doc_err(
                        format!("{pointer}/weights"),
                        format!("{} weights for {} control points", w.len(), n),
                    ));
                }
                w.clone()
            }
            None => vec![1.0; n],
        };
        NurbsSurface::new(ku, kv, self.control_points.clone(), weights)
            .map_err(|e| doc_err(format!("{pointer}/control_points"), e.to_string()))
    }
}

/// A manually specified intersection trace between two patches; when a
/// geometry document carries none, intersections are detected from the
/// patch positions instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntersectionRecord {
    pub patches: [usize; 2],
    /// Parametric samples on each patch; equal length, pairwise mapping to
    /// the same physical points.
    pub params_a: Vec<[f64; 2]>,
    pub params_b: Vec<[f64; 2]>,
    pub kind: IntersectionKind,
}

impl IntersectionRecord {
    pub fn from_intersection(x: &Intersection) -> Self {
        IntersectionRecord {
            patches: [x.patch_a, x.patch_b],
            params_a: x.para_coords_a.iter().map(|&(u, v)| [u, v]).collect(),
            params_b: x.para_coords_b.iter().map(|&(u, v)| [u, v]).collect(),
            kind: x.kind,
        }
    }

    fn into_intersection(&self, pointer: &str, num_patches: usize) -> Result<Intersection> {
        for (k, &p) in self.patches.iter().enumerate() {
            if p >= num_patches {
                return Err(doc_err(
                    format!("{pointer}/patches/{k}"),
                    format!("patch index {p} out of range for {num_patches} patches"),
                ));
            }
        }
        Intersection::new(
            self.patches[0],
            self.patches[1],
            self.params_a.iter().map(|p| (p[0], p[1])).collect(),
            self.params_b.iter().map(|p| (p[0], p[1])).collect(),
            self.kind,
        )
        .map_err(|e| doc_err(pointer.to_string(), e.to_string()))
    }
}

/// Multipatch geometry interchange document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryDocument {
    pub version: u32,
    pub patches: Vec<PatchRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub intersections: Vec<IntersectionRecord>,
}

impl GeometryDocument {
    pub fn new(patches: Vec<PatchRecord>) -> Self {
        GeometryDocument {
            version: DOCUMENT_VERSION,
            patches,
            intersections: Vec::new(),
        }
    }

    /// Snapshot a model's surfaces and intersection traces.
    pub fn from_model(model: &MultiPatchModel) -> Self {
        GeometryDocument {
            version: DOCUMENT_VERSION,
            patches: model
                .patches
                .iter()
                .map(|p| PatchRecord::from_surface(p.surface()))
                .collect(),
            intersections: model
                .intersections
                .iter()
                .map(IntersectionRecord::from_intersection)
                .collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GeometryDocument = parse_document(text)?;
        doc.validate()?;
        Ok(doc)
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        check_version(self.version, "geometry")?;
        if self.patches.is_empty() {
            return Err(doc_err("/patches", "document contains no patches"));
        }
        for (i, patch) in self.patches.iter().enumerate() {
            patch.surface_at(&format!("/patches/{i}"))?;
        }
        for (i, x) in self.intersections.iter().enumerate() {
            x.into_intersection(&format!("/intersections/{i}"), self.patches.len())?;
        }
        Ok(())
    }

    /// Validated surfaces, in patch order.
    pub fn surfaces(&self) -> Result<Vec<NurbsSurface>> {
        self.patches
            .iter()
            .enumerate()
            .map(|(i, p)| p.surface_at(&format!("/patches/{i}")))
            .collect()
    }

    /// Validated manual intersections, in document order.
    pub fn manual_intersections(&self) -> Result<Vec<Intersection>> {
        self.intersections
            .iter()
            .enumerate()
            .map(|(i, x)| x.into_intersection(&format!("/intersections/{i}"), self.patches.len()))
            .collect()
    }
}

/// Isotropic material parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialRecord {
    pub youngs_modulus: f64,
    pub poissons_ratio: f64,
}

/// A load applied to a set of patches (all of them when omitted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patches: Option<Vec<usize>>,
    pub load: LoadCase,
}

/// Displacement components fixed along one parametric patch edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BcRecord {
    pub patch: usize,
    pub edge: PatchEdge,
    pub components: Vec<usize>,
    pub order: ClampOrder,
}

/// Penalty-coupling parameters for patch intersections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CouplingRecord {
    pub penalty_coefficient: f64,
    /// Parametric sampling density per direction for intersection
    /// detection when the geometry document carries no manual traces.
    pub intersection_density: usize,
}

impl Default for CouplingRecord {
    fn default() -> Self {
        CouplingRecord {
            penalty_coefficient: 1e3,
            intersection_density: 32,
        }
    }
}

/// Which design parameterization drives the shape update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizationMode {
    Ffd,
    MovingIntersections,
    Combined,
}

/// A face (or edge, with `dir1`) of the lattice whose listed coordinate
/// fields stay at their initial values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PinRecord {
    pub dir0: usize,
    pub side0: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir1: Option<[usize; 2]>,
    pub fields: Vec<usize>,
}

/// Anti-penetration regularization: consecutive lattice points along
/// `direction` keep a gap of at least `min_gap` in each listed field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReguRecord {
    pub direction: usize,
    pub fields: Vec<usize>,
    #[serde(default)]
    pub min_gap: f64,
}

/// Optimizer bounds on one coordinate field of the lattice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitRecord {
    pub field: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
}

/// One free-form-deformation block embedding a set of patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FfdRecord {
    /// Embedded patches; omitted means every patch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patches: Option<Vec<usize>>,
    /// Elements per lattice direction.
    pub nel: [usize; 3],
    pub degree: usize,
    /// Physical block extent per axis; omitted means the tight bounding
    /// box of the embedded patches' control points (which must not be
    /// degenerate along any axis).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<[[f64; 2]; 3]>,
    /// Overrides the document-level `opt_field` for this block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opt_field: Option<Vec<usize>>,
    /// Lattice directions along which control points stay tied, keeping
    /// the block prismatic.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub align: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pins: Vec<PinRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub regularization: Vec<ReguRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub limits: Vec<LimitRecord>,
}

/// Coarse design space for one coordinate field of one patch, mapped to
/// the analysis space by degree elevation and knot refinement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSpaceRecord {
    pub patch: usize,
    pub field: usize,
    pub degrees: [usize; 2],
    /// Omitted knot vectors mean a single span of the given degree.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knots_u: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knots_v: Option<Vec<f64>>,
    /// Degrees after elevation; must match the analysis patch. Omitted
    /// means the analysis degrees.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elevate_to: Option<[usize; 2]>,
    /// Tie all design control points along this parametric direction
    /// (0 = u, 1 = v) to the first one of their line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub align: Option<usize>,
}

/// Multilevel design parameterization for moving-intersection problems.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignModelRecord {
    pub spaces: Vec<DesignSpaceRecord>,
}

/// Objective: total internal energy, optionally blended with a quadratic
/// lattice-smoothness regularization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveRecord {
    pub regularization_weight: f64,
}

impl Default for ObjectiveRecord {
    fn default() -> Self {
        ObjectiveRecord {
            regularization_weight: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    Eq,
    Le,
    Ge,
}

/// A constraint on the optimized shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConstraintRecord {
    /// Enclosed material volume (area × thickness) relative to the
    /// baseline: `volume <cmp> factor * baseline_volume`.
    Volume {
        comparison: Comparison,
        factor: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        patches: Option<Vec<usize>>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerRecord {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for OptimizerRecord {
    fn default() -> Self {
        OptimizerRecord {
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

/// Problem configuration: physics, design parameterization, objective,
/// constraints and optimizer settings for one geometry document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemDocument {
    pub version: u32,
    pub material: MaterialRecord,
    /// One entry per patch, or a single entry applied to every patch.
    pub thickness: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loads: Vec<LoadRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub boundary_conditions: Vec<BcRecord>,
    #[serde(default)]
    pub coupling: CouplingRecord,
    pub mode: OptimizationMode,
    /// Optimized coordinate fields (0 = x, 1 = y, 2 = z).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub opt_field: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ffd: Vec<FfdRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design_model: Option<DesignModelRecord>,
    #[serde(default)]
    pub objective: ObjectiveRecord,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub constraints: Vec<ConstraintRecord>,
    #[serde(default)]
    pub optimizer: OptimizerRecord,
}

impl ProblemDocument {
    pub fn from_json(text: &str) -> Result<Self> {
        parse_document(text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Cross-validate against the geometry this problem drives: all patch
    /// indices in range, mode-required sections present, fields and
    /// dimensions sane.
    pub fn validate(&self, geometry: &GeometryDocument) -> Result<()> {
        check_version(self.version, "problem")?;
        let np = geometry.patches.len();
        let check_patches = |list: &Option<Vec<usize>>, path: &str| -> Result<()> {
            if let Some(list) = list {
                if list.is_empty() {
                    return Err(doc_err(path.to_string(), "empty patch list"));
                }
                for (k, &p) in list.iter().enumerate() {
                    if p >= np {
                        return Err(doc_err(
                            format!("{path}/{k}"),
                            format!("patch index {p} out of range for {np} patches"),
                        ));
                    }
                }
            }
            Ok(())
        };
        let check_fields = |fields: &[usize], path: &str| -> Result<()> {
            if fields.is_empty() {
                return Err(doc_err(path.to_string(), "empty field list"));
            }
            for (k, &f) in fields.iter().enumerate() {
                if f > 2 {
                    return Err(doc_err(
                        format!("{path}/{k}"),
                        format!("coordinate field {f} out of range 0..3"),
                    ));
                }
            }
            Ok(())
        };

        if !(self.material.youngs_modulus > 0.0) {
            return Err(doc_err(
                "/material/youngs_modulus",
                "Young's modulus must be positive",
            ));
        }
        if !(self.material.poissons_ratio > -1.0 && self.material.poissons_ratio < 0.5) {
            return Err(doc_err(
                "/material/poissons_ratio",
                "Poisson's ratio must lie in (-1, 0.5)",
            ));
        }
        if self.thickness.len() != np && self.thickness.len() != 1 {
            return Err(doc_err(
                "/thickness",
                format!("{} thickness entries for {} patches", self.thickness.len(), np),
            ));
        }
        for (i, &t) in self.thickness.iter().enumerate() {
            if !(t > 0.0) || !t.is_finite() {
                return Err(doc_err(format!("/thickness/{i}"), "thickness must be positive"));
            }
        }
        for (i, load) in self.loads.iter().enumerate() {
            check_patches(&load.patches, &format!("/loads/{i}/patches"))?;
            load.load
                .validate()
                .map_err(|e| doc_err(format!("/loads/{i}/load"), e.to_string()))?;
        }
        for (i, bc) in self.boundary_conditions.iter().enumerate() {
            if bc.patch >= np {
                return Err(doc_err(
                    format!("/boundary_conditions/{i}/patch"),
                    format!("patch index {} out of range for {np} patches", bc.patch),
                ));
            }
            check_fields(&bc.components, &format!("/boundary_conditions/{i}/components"))?;
        }
        if !(self.coupling.penalty_coefficient > 0.0) {
            return Err(doc_err(
                "/coupling/penalty_coefficient",
                "penalty coefficient must be positive",
            ));
        }
        if self.coupling.intersection_density < 2 {
            return Err(doc_err(
                "/coupling/intersection_density",
                "sampling density must be at least 2",
            ));
        }

        let uses_ffd = matches!(self.mode, OptimizationMode::Ffd | OptimizationMode::Combined);
        let uses_design_model = self.design_model.is_some();
        if uses_ffd && self.ffd.is_empty() {
            return Err(doc_err("/ffd", "mode requires at least one FFD block"));
        }
        if !uses_ffd && !self.ffd.is_empty() {
            return Err(doc_err("/ffd", "FFD blocks are only used in ffd or combined mode"));
        }
        if self.mode == OptimizationMode::MovingIntersections && !uses_design_model {
            return Err(doc_err(
                "/design_model",
                "moving-intersections mode requires a design_model section",
            ));
        }
        if uses_design_model && self.mode == OptimizationMode::Ffd {
            return Err(doc_err(
                "/design_model",
                "a design_model section is not used in ffd mode",
            ));
        }
        if !self.opt_field.is_empty() {
            check_fields(&self.opt_field, "/opt_field")?;
        }

        for (b, block) in self.ffd.iter().enumerate() {
            let base = format!("/ffd/{b}");
            check_patches(&block.patches, &format!("{base}/patches"))?;
            if block.nel.iter().any(|&n| n == 0) {
                return Err(doc_err(format!("{base}/nel"), "every direction needs at least one element"));
            }
            if let Some(bounds) = &block.bounds {
                for (k, b) in bounds.iter().enumerate() {
                    if !(b[1] - b[0] > 0.0) || !b[0].is_finite() || !b[1].is_finite() {
                        return Err(doc_err(
                            format!("{base}/bounds/{k}"),
                            format!("degenerate extent [{}, {}]", b[0], b[1]),
                        ));
                    }
                }
            }
            let fields = block.opt_field.as_ref().unwrap_or(&self.opt_field);
            check_fields(fields, &format!("{base}/opt_field"))?;
            for (k, &d) in block.align.iter().enumerate() {
                if d > 2 {
                    return Err(doc_err(format!("{base}/align/{k}"), "lattice direction out of range 0..3"));
                }
            }
            for (k, pin) in block.pins.iter().enumerate() {
                let p = format!("{base}/pins/{k}");
                if pin.dir0 > 2 || pin.side0 > 1 {
                    return Err(doc_err(p, "pin direction must be 0..3 and side 0 or 1"));
                }
                if let Some([d1, s1]) = pin.dir1 {
                    if d1 > 2 || s1 > 1 || d1 == pin.dir0 {
                        return Err(doc_err(p, "secondary pin direction must differ and side be 0 or 1"));
                    }
                }
                check_fields(&pin.fields, &format!("{base}/pins/{k}/fields"))?;
            }
            for (k, regu) in block.regularization.iter().enumerate() {
                let p = format!("{base}/regularization/{k}");
                if regu.direction > 2 {
                    return Err(doc_err(p, "lattice direction out of range 0..3"));
                }
                check_fields(&regu.fields, &format!("{p}/fields"))?;
                if !regu.min_gap.is_finite() {
                    return Err(doc_err(format!("{p}/min_gap"), "non-finite gap"));
                }
            }
            for (k, lim) in block.limits.iter().enumerate() {
                let p = format!("{base}/limits/{k}");
                if lim.field > 2 {
                    return Err(doc_err(format!("{p}/field"), "coordinate field out of range 0..3"));
                }
                if let (Some(lo), Some(hi)) = (lim.lower, lim.upper) {
                    if !(lo <= hi) {
                        return Err(doc_err(p, format!("empty bound interval [{lo}, {hi}]")));
                    }
                }
            }
        }

        if let Some(dm) = &self.design_model {
            if dm.spaces.is_empty() {
                return Err(doc_err("/design_model/spaces", "empty design space list"));
            }
            let mut seen = std::collections::BTreeSet::new();
            for (k, space) in dm.spaces.iter().enumerate() {
                let p = format!("/design_model/spaces/{k}");
                if space.patch >= np {
                    return Err(doc_err(
                        format!("{p}/patch"),
                        format!("patch index {} out of range for {np} patches", space.patch),
                    ));
                }
                if space.field > 2 {
                    return Err(doc_err(format!("{p}/field"), "coordinate field out of range 0..3"));
                }
                if !seen.insert((space.patch, space.field)) {
                    return Err(doc_err(
                        p,
                        format!("duplicate design space for patch {} field {}", space.patch, space.field),
                    ));
                }
                if let Some(d) = space.align {
                    if d > 1 {
                        return Err(doc_err(format!("{p}/align"), "parametric direction must be 0 or 1"));
                    }
                }
            }
        }

        if !self.objective.regularization_weight.is_finite()
            || self.objective.regularization_weight < 0.0
        {
            return Err(doc_err(
                "/objective/regularization_weight",
                "regularization weight must be finite and non-negative",
            ));
        }
        for (i, c) in self.constraints.iter().enumerate() {
            match c {
                ConstraintRecord::Volume { factor, patches, .. } => {
                    if !(*factor > 0.0) || !factor.is_finite() {
                        return Err(doc_err(
                            format!("/constraints/{i}/factor"),
                            "volume factor must be positive",
                        ));
                    }
                    check_patches(patches, &format!("/constraints/{i}/patches"))?;
                }
            }
        }
        if !(self.optimizer.tol > 0.0) || !self.optimizer.tol.is_finite() {
            return Err(doc_err("/optimizer/tol", "tolerance must be positive"));
        }
        if self.optimizer.max_iter == 0 {
            return Err(doc_err("/optimizer/max_iter", "at least one iteration required"));
        }
        Ok(())
    }
}

/// Read and validate a geometry document.
pub fn read_geometry(path: impl AsRef<Path>) -> Result<GeometryDocument> {
    GeometryDocument::from_json(&std::fs::read_to_string(path)?)
}

pub fn write_geometry(doc: &GeometryDocument, path: impl AsRef<Path>) -> Result<()> {
    let mut text = doc.to_json()?;
    text.push('\n');
    Ok(std::fs::write(path, text)?)
}

/// Read a problem document. Cross-field validation happens against the
/// geometry via [`ProblemDocument::validate`].
pub fn read_problem(path: impl AsRef<Path>) -> Result<ProblemDocument> {
    ProblemDocument::from_json(&std::fs::read_to_string(path)?)
}

pub fn write_problem(doc: &ProblemDocument, path: impl AsRef<Path>) -> Result<()> {
    let mut text = doc.to_json()?;
    text.push('\n');
    Ok(std::fs::write(path, text)?)
}
