use super::sparse::CscMatrix;
use crate::{Error, Result};
use std::sync::atomic::{AtomicUsize, Ordering};

/// Left-looking sparse LU factorization with partial pivoting
/// (Gilbert–Peierls): each column is obtained by a sparse triangular solve
/// whose nonzero pattern comes from a depth-first search of the partially
/// built L.
///
/// One factorization serves plain and transpose solves; instrumentation
/// counters record how often each is used so factorization reuse can be
/// asserted in tests.
#[derive(Debug)]
pub struct SparseLu {
    n: usize,
    /// Strictly-below-diagonal part of unit-lower L, permuted row indices.
    l: Store,
    /// Strictly-above-diagonal part of U (permuted rows) plus its diagonal.
    u: Store,
    u_diag: Vec<f64>,
    /// `pinv[original_row] = pivot position`.
    pinv: Vec<usize>,
    solves: AtomicUsize,
    transpose_solves: AtomicUsize,
}

#[derive(Debug, Default)]
struct Store {
    col_ptr: Vec<usize>,
    rows: Vec<usize>,
    vals: Vec<f64>,
}

impl Store {
    fn from_cols(cols: Vec<Vec<(usize, f64)>>) -> Store {
        let mut s = Store {
            col_ptr: Vec::with_capacity(cols.len() + 1),
            rows: Vec::new(),
            vals: Vec::new(),
        };
        s.col_ptr.push(0);
        for col in cols {
            for (r, v) in col {
                s.rows.push(r);
                s.vals.push(v);
            }
            s.col_ptr.push(s.rows.len());
        }
        s
    }

    #[inline]
    fn col(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.col_ptr[j]..self.col_ptr[j + 1];
        self.rows[r.clone()]
            .iter()
            .copied()
            .zip(self.vals[r].iter().copied())
    }
}

impl SparseLu {
    pub fn factor(a: &CscMatrix) -> Result<SparseLu> {
        let n = a.require_square()?;
        let mut l_cols: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
        let mut u_cols: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
        let mut u_diag = Vec::with_capacity(n);
        let mut pinv = vec![usize::MAX; n];
        let mut x = vec![0.0f64; n];
        let mut mark = vec![usize::MAX; n];
        let mut topo: Vec<usize> = Vec::with_capacity(n);
        let mut dfs: Vec<(usize, usize)> = Vec::new();

        for k in 0..n {
            // Reachable set of A[:,k] through the graph of L, emitted in
            // DFS finish order (reverse topological).
            topo.clear();
            let (a_rows, a_vals) = a.col(k);
            for &start in a_rows {
                if mark[start] == k {
                    continue;
                }
                mark[start] = k;
                dfs.push((start, 0));
                while let Some(&mut (node, ref mut child)) = dfs.last_mut() {
                    let col = pinv[node];
                    let mut descended = false;
                    if col != usize::MAX {
                        let range = l_cols[col].len();
                        while *child < range {
                            let next = l_cols[col][*child].0;
                            *child += 1;
                            if mark[next] != k {
                                mark[next] = k;
                                dfs.push((next, 0));
                                descended = true;
                                break;
                            }
                        }
                    }
                    if !descended {
                        dfs.pop();
                        topo.push(node);
                    }
                }
            }

            // Sparse solve x = L \ A[:,k] over the reach, in topological
            // order (parents before the rows they update).
            for &i in &topo {
                x[i] = 0.0;
            }
            for (&r, &v) in a_rows.iter().zip(a_vals) {
                x[r] = v;
            }
            for &j in topo.iter().rev() {
                let col = pinv[j];
                if col == usize::MAX {
                    continue;
                }
                let xj = x[j];
                if xj != 0.0 {
                    for &(r, lv) in &l_cols[col] {
                        x[r] -= lv * xj;
                    }
                }
            }

            // Partial pivoting among rows that are not yet pivotal.
            let mut ipiv = usize::MAX;
            let mut amax = -1.0;
            for &i in &topo {
                if pinv[i] == usize::MAX {
                    let t = x[i].abs();
                    if t > amax {
                        amax = t;
                        ipiv = i;
                    }
                }
            }
            if ipiv == usize::MAX || !(amax > 0.0) {
                return Err(Error::SingularMatrix {
                    pivot: k,
                    magnitude: amax.max(0.0),
                });
            }
            let pivot = x[ipiv];
            pinv[ipiv] = k;

            let mut ucol: Vec<(usize, f64)> = topo
                .iter()
                .filter(|&&i| pinv[i] != usize::MAX && i != ipiv)
                .map(|&i| (pinv[i], x[i]))
                .collect();
            ucol.sort_unstable_by_key(|e| e.0);
            u_cols.push(ucol);
            u_diag.push(pivot);

            let lcol: Vec<(usize, f64)> = topo
                .iter()
                .filter(|&&i| pinv[i] == usize::MAX)
                .map(|&i| (i, x[i] / pivot))
                .collect();
            l_cols.push(lcol);
        }

        // Map L's row indices to pivot positions; sort for determinism.
        for col in &mut l_cols {
            for e in col.iter_mut() {
                e.0 = pinv[e.0];
            }
            col.sort_unstable_by_key(|e| e.0);
        }

        Ok(SparseLu {
            n,
            l: Store::from_cols(l_cols),
            u: Store::from_cols(u_cols),
            u_diag,
            pinv,
            solves: AtomicUsize::new(0),
            transpose_solves: AtomicUsize::new(0),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> (usize, usize) {
        (self.l.rows.len() + self.n, self.u.rows.len() + self.n)
    }

    pub fn solve_count(&self) -> usize {
        self.solves.load(Ordering::Relaxed)
    }

    pub fn transpose_solve_count(&self) -> usize {
        self.transpose_solves.load(Ordering::Relaxed)
    }

    /// `x = A \ b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        self.solves.fetch_add(1, Ordering::Relaxed);
        // y = P b
        let mut y = vec![0.0; self.n];
        for (i, &bi) in b.iter().enumerate() {
            y[self.pinv[i]] = bi;
        }
        // L z = y (unit diagonal), scatter form.
        for k in 0..self.n {
            let zk = y[k];
            if zk != 0.0 {
                for (r, v) in self.l.col(k) {
                    y[r] -= v * zk;
                }
            }
        }
        // U x = z, scatter form with diagonal stored separately.
        for k in (0..self.n).rev() {
            y[k] /= self.u_diag[k];
            let xk = y[k];
            if xk != 0.0 {
                for (r, v) in self.u.col(k) {
                    y[r] -= v * xk;
                }
            }
        }
        y
    }

    /// `x = A^T \ b`, reusing the same factorization.
    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        self.transpose_solves.fetch_add(1, Ordering::Relaxed);
        // U^T z = b, gather form (rows above the diagonal are known).
        let mut z = vec![0.0; self.n];
        for k in 0..self.n {
            let mut s = b[k];
            for (r, v) in self.u.col(k) {
                s -= v * z[r];
            }
            z[k] = s / self.u_diag[k];
        }
        // L^T w = z, gather form.
        for k in (0..self.n).rev() {
            let mut s = z[k];
            for (r, v) in self.l.col(k) {
                s -= v * z[r];
            }
            z[k] = s;
        }
        // x = P^T w.
        let mut xout = vec![0.0; self.n];
        for (i, xo) in xout.iter_mut().enumerate() {
            *xo = z[self.pinv[i]];
        }
        xout
    }
}

/// One-shot factor + solve.
pub fn sparse_solve(k: &CscMatrix, b: &[f64]) -> Result<Vec<f64>> {
    Ok(SparseLu::factor(k)?.solve(b))
}

/// One-shot factor + transpose solve.
pub fn sparse_solve_transpose(k: &CscMatrix, b: &[f64]) -> Result<Vec<f64>> {
    Ok(SparseLu::factor(k)?.solve_transpose(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::sparse::Triplets;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn random_sparse(n: usize, per_col: usize, seed: u64) -> CscMatrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut t = Triplets::new(n, n);
        for j in 0..n {
            // Guarantee structural non-singularity with a diagonal entry.
            t.push(j, j, 2.0 + rng.gen_range(0.0..1.0));
            for _ in 0..per_col {
                let i = rng.gen_range(0..n);
                t.push(i, j, rng.gen_range(-1.0..1.0));
            }
        }
        t.into_csc()
    }

    #[test]
    fn identity_solve_returns_rhs() {
        let lu = SparseLu::factor(&CscMatrix::identity(5)).unwrap();
        let b = vec![1.0, -2.0, 3.0, 0.0, 0.5];
        assert_eq!(lu.solve(&b), b);
        assert_eq!(lu.solve_transpose(&b), b);
    }

    #[test]
    fn reconstruction_residual_small() {
        let a = random_sparse(200, 6, 42);
        let lu = SparseLu::factor(&a).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let b: Vec<f64> = (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = lu.solve(&b);
        let r = a.matvec(&x);
        let num = r
            .iter()
            .zip(&b)
            .map(|(ri, bi)| (ri - bi) * (ri - bi))
            .sum::<f64>()
            .sqrt();
        let den = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(num / den <= 1e-10, "relative residual {}", num / den);
    }

    #[test]
    fn spd_500_matches_dense_oracle() {
        // Random sparse SPD built as B^T B + n I, solved against nalgebra's
        // dense factorization.
        let n = 500;
        let b_mat = random_sparse(n, 4, 3);
        let bd = b_mat.to_dense();
        let spd_dense = bd.transpose() * &bd + nalgebra::DMatrix::identity(n, n) * n as f64;
        let mut t = Triplets::new(n, n);
        for j in 0..n {
            for i in 0..n {
                let v = spd_dense[(i, j)];
                if v != 0.0 {
                    t.push(i, j, v);
                }
            }
        }
        let spd = t.into_csc();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let rhs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = SparseLu::factor(&spd).unwrap().solve(&rhs);
        let x_dense = spd_dense
            .clone()
            .lu()
            .solve(&nalgebra::DVector::from_row_slice(&rhs))
            .unwrap();
        let scale = x_dense.amax();
        for i in 0..n {
            assert_relative_eq!(x[i], x_dense[i], epsilon = 1e-9 * scale.max(1.0));
        }
    }

    #[test]
    fn transpose_solve_matches_dense_oracle() {
        let n = 80;
        let a = random_sparse(n, 5, 9);
        let lu = SparseLu::factor(&a).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = lu.solve_transpose(&b);
        let xd = a
            .to_dense()
            .transpose()
            .lu()
            .solve(&nalgebra::DVector::from_row_slice(&b))
            .unwrap();
        for i in 0..n {
            assert_relative_eq!(x[i], xd[i], epsilon = 1e-9, max_relative = 1e-8);
        }
    }

    #[test]
    fn singular_matrix_reports_pivot() {
        let mut t = Triplets::new(3, 3);
        t.push(0, 0, 1.0);
        t.push(1, 1, 1.0);
        // Column 2 empty -> zero pivot at elimination step 2.
        t.push(0, 2, 0.0);
        let err = SparseLu::factor(&t.into_csc()).unwrap_err();
        match err {
            Error::SingularMatrix { pivot, .. } => assert_eq!(pivot, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn pivoting_handles_zero_diagonal() {
        // [[0, 1], [1, 0]] requires a row swap.
        let mut t = Triplets::new(2, 2);
        t.push(1, 0, 1.0);
        t.push(0, 1, 1.0);
        let lu = SparseLu::factor(&t.into_csc()).unwrap();
        let x = lu.solve(&[3.0, 4.0]);
        assert_relative_eq!(x[0], 4.0);
        assert_relative_eq!(x[1], 3.0);
    }

    #[test]
    fn counters_assert_factorization_reuse() {
        let a = random_sparse(50, 3, 21);
        let lu = SparseLu::factor(&a).unwrap();
        let b = vec![1.0; 50];
        for _ in 0..5 {
            lu.solve(&b);
        }
        for _ in 0..3 {
            lu.solve_transpose(&b);
        }
        assert_eq!(lu.solve_count(), 5);
        assert_eq!(lu.transpose_solve_count(), 3);
    }
}
