use crate::{Error, Result};

/// Coordinate-format accumulator; duplicate entries sum on conversion.
#[derive(Debug, Clone)]
pub struct Triplets {
    nrows: usize,
    ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Triplets {
            nrows,
            ncols,
            entries: Vec::new(),
        }
    }

    #[inline]
    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        if value != 0.0 {
            self.entries.push((row, col, value));
        }
    }

    pub fn extend_from(&mut self, other: Triplets) {
        debug_assert_eq!(self.nrows, other.nrows);
        debug_assert_eq!(self.ncols, other.ncols);
        self.entries.extend(other.entries);
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn into_csc(self) -> CscMatrix {
        let mut col_counts = vec![0usize; self.ncols + 1];
        for &(_, c, _) in &self.entries {
            col_counts[c + 1] += 1;
        }
        for j in 0..self.ncols {
            col_counts[j + 1] += col_counts[j];
        }
        let mut row_idx = vec![0usize; self.entries.len()];
        let mut values = vec![0.0; self.entries.len()];
        let mut next = col_counts.clone();
        for &(r, c, v) in &self.entries {
            let p = next[c];
            row_idx[p] = r;
            values[p] = v;
            next[c] += 1;
        }
        // Sort rows within each column and merge duplicates.
        let mut out_ptr = vec![0usize; self.ncols + 1];
        let mut out_rows = Vec::with_capacity(row_idx.len());
        let mut out_vals = Vec::with_capacity(values.len());
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for j in 0..self.ncols {
            scratch.clear();
            scratch.extend(
                row_idx[col_counts[j]..col_counts[j + 1]]
                    .iter()
                    .copied()
                    .zip(values[col_counts[j]..col_counts[j + 1]].iter().copied()),
            );
            scratch.sort_unstable_by_key(|&(r, _)| r);
            let mut i = 0;
            while i < scratch.len() {
                let (r, mut v) = scratch[i];
                let mut k = i + 1;
                while k < scratch.len() && scratch[k].0 == r {
                    v += scratch[k].1;
                    k += 1;
                }
                out_rows.push(r);
                out_vals.push(v);
                i = k;
            }
            out_ptr[j + 1] = out_rows.len();
        }
        CscMatrix {
            nrows: self.nrows,
            ncols: self.ncols,
            col_ptr: out_ptr,
            row_idx: out_rows,
            values: out_vals,
        }
    }
}

/// Compressed sparse column matrix with sorted, duplicate-free columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CscMatrix {
    pub fn identity(n: usize) -> Self {
        CscMatrix {
            nrows: n,
            ncols: n,
            col_ptr: (0..=n).collect(),
            row_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    /// `(row_indices, values)` of column `j`.
    #[inline]
    pub fn col(&self, j: usize) -> (&[usize], &[f64]) {
        let r = self.col_ptr[j]..self.col_ptr[j + 1];
        (&self.row_idx[r.clone()], &self.values[r])
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.ncols);
        let mut y = vec![0.0; self.nrows];
        for j in 0..self.ncols {
            let xj = x[j];
            if xj != 0.0 {
                let (rows, vals) = self.col(j);
                for (&r, &v) in rows.iter().zip(vals) {
                    y[r] += v * xj;
                }
            }
        }
        y
    }

    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.nrows);
        let mut y = vec![0.0; self.ncols];
        for (j, yj) in y.iter_mut().enumerate() {
            let (rows, vals) = self.col(j);
            *yj = rows.iter().zip(vals).map(|(&r, &v)| v * x[r]).sum();
        }
        y
    }

    pub fn transpose(&self) -> CscMatrix {
        let mut t = Triplets::new(self.ncols, self.nrows);
        for j in 0..self.ncols {
            let (rows, vals) = self.col(j);
            for (&r, &v) in rows.iter().zip(vals) {
                t.push(j, r, v);
            }
        }
        t.into_csc()
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Maximum relative asymmetry `|K - K^T| / |K|` (Frobenius).
    pub fn asymmetry(&self) -> f64 {
        let t = self.transpose();
        let mut diff = 0.0;
        for j in 0..self.ncols {
            let (ra, va) = self.col(j);
            let (rb, vb) = t.col(j);
            // Merge the two sorted columns.
            let (mut ia, mut ib) = (0, 0);
            while ia < ra.len() || ib < rb.len() {
                let (r1, r2) = (
                    ra.get(ia).copied().unwrap_or(usize::MAX),
                    rb.get(ib).copied().unwrap_or(usize::MAX),
                );
                let d = match r1.cmp(&r2) {
                    std::cmp::Ordering::Less => {
                        ia += 1;
                        va[ia - 1]
                    }
                    std::cmp::Ordering::Greater => {
                        ib += 1;
                        -vb[ib - 1]
                    }
                    std::cmp::Ordering::Equal => {
                        ia += 1;
                        ib += 1;
                        va[ia - 1] - vb[ib - 1]
                    }
                };
                diff += d * d;
            }
        }
        diff.sqrt() / self.norm().max(f64::MIN_POSITIVE)
    }

    /// Gram matrix `A^T A` (symmetric positive semidefinite).
    pub fn ata(&self) -> CscMatrix {
        let mut t = Triplets::new(self.ncols, self.ncols);
        let mut scratch = vec![0.0; self.nrows];
        for j in 0..self.ncols {
            let (rows_j, vals_j) = self.col(j);
            for (&r, &v) in rows_j.iter().zip(vals_j) {
                scratch[r] = v;
            }
            for k in j..self.ncols {
                let (rows_k, vals_k) = self.col(k);
                let dot: f64 = rows_k.iter().zip(vals_k).map(|(&r, &v)| v * scratch[r]).sum();
                if dot != 0.0 {
                    t.push(j, k, dot);
                    if k != j {
                        t.push(k, j, dot);
                    }
                }
            }
            for &r in rows_j {
                scratch[r] = 0.0;
            }
        }
        t.into_csc()
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.nrows, self.ncols);
        for j in 0..self.ncols {
            let (rows, vals) = self.col(j);
            for (&r, &v) in rows.iter().zip(vals) {
                m[(r, j)] = v;
            }
        }
        m
    }

    pub fn require_square(&self) -> Result<usize> {
        if self.nrows != self.ncols {
            return Err(Error::DimensionMismatch(format!(
                "matrix is {} x {}, expected square",
                self.nrows, self.ncols
            )));
        }
        Ok(self.nrows)
    }
}
