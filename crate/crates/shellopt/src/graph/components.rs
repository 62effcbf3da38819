//! General-purpose graph components: affine maps, the nodal-to-spline
//! least-squares fit, second-difference regularization and the elimination
//! of simple lattice equality constraints into a reduced design space.

use super::{csc_row, scale_csc, Component, ComponentKind, Partials, VarSpec};
use crate::geometry::ConstraintRow;
use crate::solver::{CscMatrix, SparseLu, Triplets};
use crate::{Error, Result};

/// Explicit affine map `y = Σ_j A_j x_j + b` with constant sparse blocks.
///
/// Covers lattice-to-surface evaluation, refinement/elevation control-point
/// maps, constraint rows, design-space expansion and weighted sums of
/// scalars — anything whose Jacobian does not depend on the point.
pub struct LinearComp {
    name: String,
    inputs: Vec<VarSpec>,
    output: VarSpec,
    blocks: Vec<CscMatrix>,
    offset: Vec<f64>,
}

impl LinearComp {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<VarSpec>,
        output: impl Into<String>,
        blocks: Vec<CscMatrix>,
        offset: Option<Vec<f64>>,
    ) -> Result<Self> {
        let name = name.into();
        if blocks.len() != inputs.len() || inputs.is_empty() {
            return Err(Error::Graph(format!(
                "component '{name}': {} blocks for {} inputs",
                blocks.len(),
                inputs.len()
            )));
        }
        let nrows = blocks[0].nrows();
        for (spec, block) in inputs.iter().zip(&blocks) {
            if block.nrows() != nrows || block.ncols() != spec.size {
                return Err(Error::Graph(format!(
                    "component '{name}': block for '{}' is {}x{}, expected {}x{}",
                    spec.name,
                    block.nrows(),
                    block.ncols(),
                    nrows,
                    spec.size
                )));
            }
        }
        let offset = offset.unwrap_or_else(|| vec![0.0; nrows]);
        if offset.len() != nrows {
            return Err(Error::Graph(format!(
                "component '{name}': offset has {} entries for {nrows} rows",
                offset.len()
            )));
        }
        Ok(LinearComp {
            name,
            inputs,
            output: VarSpec::new(output, nrows),
            blocks,
            offset,
        })
    }

    /// Scalar combination `y = Σ wᵢ xᵢ` of scalar inputs.
    pub fn weighted_sum(
        name: impl Into<String>,
        terms: &[(&str, f64)],
        output: impl Into<String>,
    ) -> Result<Self> {
        let inputs = terms
            .iter()
            .map(|(n, _)| VarSpec::new(*n, 1))
            .collect::<Vec<_>>();
        let blocks = terms
            .iter()
            .map(|&(_, w)| {
                let mut t = Triplets::new(1, 1);
                t.push(0, 0, w);
                t.into_csc()
            })
            .collect();
        LinearComp::new(name, inputs, output, blocks, None)
    }

    /// Stacked constraint rows `y_r = Σ terms` over one field vector; pair
    /// the output with a [`super::ConstraintSpec`] holding the row bounds.
    pub fn from_constraint_rows(
        name: impl Into<String>,
        input: VarSpec,
        rows: &[ConstraintRow],
        output: impl Into<String>,
    ) -> Result<Self> {
        let mut t = Triplets::new(rows.len(), input.size);
        for (r, row) in rows.iter().enumerate() {
            for &(i, c) in &row.terms {
                if i >= input.size {
                    return Err(Error::Graph(format!(
                        "constraint row {r} references index {i} beyond size {}",
                        input.size
                    )));
                }
                t.push(r, i, c);
            }
        }
        LinearComp::new(name, vec![input], output, vec![t.into_csc()], None)
    }
}

impl Component for LinearComp {
    fn name(&self) -> &str {
        &self.name
    }
    fn inputs(&self) -> Vec<VarSpec> {
        self.inputs.clone()
    }
    fn outputs(&self) -> Vec<VarSpec> {
        vec![self.output.clone()]
    }
    fn eval(&mut self, inputs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let mut y = self.offset.clone();
        for (block, x) in self.blocks.iter().zip(inputs) {
            for (yi, v) in y.iter_mut().zip(block.matvec(x)) {
                *yi += v;
            }
        }
        Ok(vec![y])
    }
    fn partials(&mut self, _: &[&[f64]], _: &[&[f64]]) -> Result<Partials> {
        let mut p = Partials::explicit();
        for (j, block) in self.blocks.iter().enumerate() {
            p.push(0, j, block.clone());
        }
        Ok(p)
    }
}

/// Implicit least-squares fit of spline control points to stacked nodal
/// values of one coordinate field: the state `P` solves the normal
/// equations `MᵀM·P − Mᵀ·P_L = 0`, i.e. `P = (MᵀM)⁻¹Mᵀ P_L` — the
/// pseudo-inverse of the (block-diagonal, per-patch) extraction operator.
pub struct Fe2IgaComp {
    name: String,
    input: VarSpec,
    output: VarSpec,
    mt: CscMatrix,
    gram: CscMatrix,
    factor: SparseLu,
}

impl Fe2IgaComp {
    /// `extraction` maps control-point values to nodal values (rows =
    /// nodes, columns = control points); stack patches with
    /// [`block_diag`](Self::block_diag).
    pub fn new(
        name: impl Into<String>,
        input: impl Into<String>,
        output: impl Into<String>,
        extraction: &CscMatrix,
    ) -> Result<Self> {
        let name = name.into();
        let gram = extraction.ata();
        let factor = SparseLu::factor(&gram).map_err(|e| {
            Error::Graph(format!("component '{name}': extraction fit is singular: {e}"))
        })?;
        Ok(Fe2IgaComp {
            name,
            input: VarSpec::new(input, extraction.nrows()),
            output: VarSpec::new(output, extraction.ncols()),
            mt: extraction.transpose(),
            gram,
            factor,
        })
    }

    /// Block-diagonal concatenation of per-patch extraction matrices.
    pub fn block_diag(matrices: &[&CscMatrix]) -> CscMatrix {
        let owned: Vec<CscMatrix> = matrices.iter().map(|&m| m.clone()).collect();
        super::block_diag_csc(&owned)
    }
}

impl Component for Fe2IgaComp {
    fn name(&self) -> &str {
        &self.name
    }
    fn kind(&self) -> ComponentKind {
        ComponentKind::Implicit
    }
    fn inputs(&self) -> Vec<VarSpec> {
        vec![self.input.clone()]
    }
    fn outputs(&self) -> Vec<VarSpec> {
        vec![self.output.clone()]
    }
    fn eval(&mut self, inputs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let rhs = self.mt.matvec(inputs[0]);
        Ok(vec![self.factor.solve(&rhs)])
    }
    fn partials(&mut self, _: &[&[f64]], _: &[&[f64]]) -> Result<Partials> {
        let mut p = Partials::implicit(self.gram.clone());
        p.push(0, 0, scale_csc(&self.mt, -1.0));
        Ok(p)
    }
}

/// Smoothness penalty `r = Σ_lines Σ_j (x_{i_{j+1}} − 2x_{i_j} + x_{i_{j-1}})²`
/// over index lines of one field vector (explicit, scalar output).
pub struct RegularizationComp {
    name: String,
    input: VarSpec,
    output: String,
    d2: CscMatrix,
}

impl RegularizationComp {
    pub fn new(
        name: impl Into<String>,
        input: VarSpec,
        lines: &[Vec<usize>],
        output: impl Into<String>,
    ) -> Result<Self> {
        let name = name.into();
        let mut t = Triplets::new(
            lines.iter().map(|l| l.len().saturating_sub(2)).sum(),
            input.size,
        );
        let mut row = 0;
        for line in lines {
            for w in line.windows(3) {
                for &i in w {
                    if i >= input.size {
                        return Err(Error::Graph(format!(
                            "component '{name}': line index {i} beyond size {}",
                            input.size
                        )));
                    }
                }
                t.push(row, w[0], 1.0);
                t.push(row, w[1], -2.0);
                t.push(row, w[2], 1.0);
                row += 1;
            }
        }
        Ok(RegularizationComp {
            name,
            input,
            output: output.into(),
            d2: t.into_csc(),
        })
    }
}

impl Component for RegularizationComp {
    fn name(&self) -> &str {
        &self.name
    }
    fn inputs(&self) -> Vec<VarSpec> {
        vec![self.input.clone()]
    }
    fn outputs(&self) -> Vec<VarSpec> {
        vec![VarSpec::new(&self.output, 1)]
    }
    fn eval(&mut self, inputs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let r = self.d2.matvec(inputs[0]);
        Ok(vec![vec![r.iter().map(|v| v * v).sum()]])
    }
    fn partials(&mut self, inputs: &[&[f64]], _: &[&[f64]]) -> Result<Partials> {
        let r = self.d2.matvec(inputs[0]);
        let mut grad = self.d2.matvec_transpose(&r);
        for g in &mut grad {
            *g *= 2.0;
        }
        let mut p = Partials::explicit();
        p.push(0, 0, csc_row(&grad));
        Ok(p)
    }
}

/// Affine reduction `x_full = E·x_red + c` obtained by eliminating tie
/// (`x_i = x_j`) and pin (`x_i = v`) equality rows from a field vector.
#[derive(Debug, Clone)]
pub struct FieldReduction {
    pub expand: CscMatrix,
    pub offset: Vec<f64>,
    /// One full-vector member per reduced dof (the smallest index of its
    /// tie class), in ascending order.
    pub representatives: Vec<usize>,
}

impl FieldReduction {
    pub fn reduced_size(&self) -> usize {
        self.representatives.len()
    }

    pub fn expand_values(&self, reduced: &[f64]) -> Vec<f64> {
        let mut full = self.offset.clone();
        for (f, v) in full.iter_mut().zip(self.expand.matvec(reduced)) {
            *f += v;
        }
        full
    }

    pub fn restrict_values(&self, full: &[f64]) -> Vec<f64> {
        self.representatives.iter().map(|&i| full[i]).collect()
    }

    /// The expansion as an explicit graph component.
    pub fn into_component(
        self,
        name: impl Into<String>,
        input: impl Into<String>,
        output: impl Into<String>,
    ) -> Result<LinearComp> {
        LinearComp::new(
            name,
            vec![VarSpec::new(input, self.reduced_size())],
            output,
            vec![self.expand],
            Some(self.offset),
        )
    }
}

/// Try to eliminate equality rows over a vector of `n` entries. Handles
/// two-term rows with opposite coefficients and zero right-hand side
/// (ties) and single-term rows (pins); returns `None` for any other row
/// shape, in which case the caller should keep the rows as explicit
/// linear constraints.
pub fn eliminate_ties(n: usize, rows: &[ConstraintRow]) -> Option<FieldReduction> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }

    let mut pins: Vec<Option<f64>> = vec![None; n];
    for row in rows {
        match row.terms.as_slice() {
            [(i, a)] if *a != 0.0 => {
                let v = row.rhs / a;
                let r = find(&mut parent, *i);
                match pins[r] {
                    Some(existing) if (existing - v).abs() > 1e-12 * (1.0 + v.abs()) => {
                        return None;
                    }
                    _ => pins[r] = Some(v),
                }
            }
            [(i, a), (j, b)] if row.rhs == 0.0 && *a != 0.0 && (*a + *b).abs() == 0.0 => {
                let (ri, rj) = (find(&mut parent, *i), find(&mut parent, *j));
                if ri != rj {
                    // Merge into the smaller root; carry any pin along.
                    let (keep, drop) = (ri.min(rj), ri.max(rj));
                    match (pins[keep], pins[drop]) {
                        (Some(a), Some(b)) if (a - b).abs() > 1e-12 * (1.0 + a.abs()) => {
                            return None
                        }
                        (None, Some(b)) => pins[keep] = Some(b),
                        _ => {}
                    }
                    parent[drop] = keep;
                }
            }
            _ => return None,
        }
    }

    // Re-resolve pins onto final roots (a pinned root may have been merged).
    let mut root_pin: Vec<Option<f64>> = vec![None; n];
    for i in 0..n {
        if let Some(v) = pins[i] {
            let r = find(&mut parent, i);
            match root_pin[r] {
                Some(existing) if (existing - v).abs() > 1e-12 * (1.0 + v.abs()) => return None,
                _ => root_pin[r] = Some(v),
            }
        }
    }

    let mut representatives = Vec::new();
    let mut dof_of_root: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        if root_pin[r].is_none() && r == i {
            dof_of_root[r] = Some(representatives.len());
            representatives.push(i);
        }
    }

    let mut t = Triplets::new(n, representatives.len());
    let mut offset = vec![0.0; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        match root_pin[r] {
            Some(v) => offset[i] = v,
            None => t.push(i, dof_of_root[r].unwrap(), 1.0),
        }
    }
    Some(FieldReduction {
        expand: t.into_csc(),
        offset,
        representatives,
    })
}
