//! Block-sparse Cholesky factorization of the normal equations.
//!
//! Blocks are variables. The elimination order is a minimum-degree ordering
//! of the block graph with ties broken by block index, so the factorization
//! is deterministic. The symbolic pattern is recorded while computing the
//! ordering and reused for every numeric factorization in a solve.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

pub(super) struct BlockStructure {
    dims: Vec<usize>,
    /// `order[k]` is the block eliminated at step `k`.
    order: Vec<usize>,
    /// Inverse of `order`.
    position: Vec<usize>,
    /// Row positions (> k, ascending) of the nonzero blocks below the diagonal in column `k`.
    col_rows: Vec<Vec<usize>>,
}

impl BlockStructure {
    pub fn new(dims: Vec<usize>, edges: &BTreeSet<(usize, usize)>) -> Self {
        let n = dims.len();
        let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for &(a, b) in edges {
            if a != b {
                adj[a].insert(b);
                adj[b].insert(a);
            }
        }
        let mut eliminated = vec![false; n];
        let mut order = Vec::with_capacity(n);
        let mut patterns: Vec<Vec<usize>> = Vec::with_capacity(n);
        for _ in 0..n {
            let v = (0..n)
                .filter(|&i| !eliminated[i])
                .min_by_key(|&i| (adj[i].len(), i))
                .expect("a block remains");
            let nbrs: Vec<usize> = adj[v].iter().copied().collect();
            for (i, &a) in nbrs.iter().enumerate() {
                adj[a].remove(&v);
                for &b in &nbrs[i + 1..] {
                    adj[a].insert(b);
                    adj[b].insert(a);
                }
            }
            adj[v].clear();
            eliminated[v] = true;
            order.push(v);
            patterns.push(nbrs);
        }
        let mut position = vec![0; n];
        for (k, &b) in order.iter().enumerate() {
            position[b] = k;
        }
        let col_rows = patterns
            .into_iter()
            .map(|nbrs| {
                let mut rows: Vec<usize> = nbrs.into_iter().map(|b| position[b]).collect();
                rows.sort_unstable();
                rows
            })
            .collect();
        Self {
            dims,
            order,
            position,
            col_rows,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.dims.len()
    }

    /// Empty lower-triangular system with this structure.
    pub fn system(&self) -> BlockSystem {
        let n = self.num_blocks();
        let diag = (0..n)
            .map(|k| {
                let d = self.dims[self.order[k]];
                DMatrix::zeros(d, d)
            })
            .collect();
        let off = (0..n)
            .map(|k| {
                let dk = self.dims[self.order[k]];
                self.col_rows[k]
                    .iter()
                    .map(|&i| DMatrix::zeros(self.dims[self.order[i]], dk))
                    .collect()
            })
            .collect();
        let rhs = (0..n).map(|k| DVector::zeros(self.dims[self.order[k]])).collect();
        BlockSystem { diag, off, rhs }
    }

    fn slot(&self, row: usize, col: usize) -> usize {
        self.col_rows[col]
            .binary_search(&row)
            .expect("block lies in the symbolic pattern")
    }

    /// Adds `h` to the Hessian block of blocks `(a, b)`; `h` is `dim(a) x dim(b)`.
    pub fn add_hessian(&self, sys: &mut BlockSystem, a: usize, b: usize, h: &DMatrix<f64>) {
        let (pa, pb) = (self.position[a], self.position[b]);
        if pa == pb {
            sys.diag[pa] += h;
        } else if pa > pb {
            let s = self.slot(pa, pb);
            sys.off[pb][s] += h;
        } else {
            let s = self.slot(pb, pa);
            sys.off[pa][s] += h.transpose();
        }
    }

    pub fn add_rhs(&self, sys: &mut BlockSystem, a: usize, g: &DVector<f64>) {
        sys.rhs[self.position[a]] += g;
    }

    /// Factorizes in place and solves. On failure returns the block whose
    /// pivot was not positive definite.
    pub fn solve(&self, mut sys: BlockSystem) -> Result<Vec<DVector<f64>>, usize> {
        let n = self.num_blocks();
        for k in 0..n {
            let chol = std::mem::replace(&mut sys.diag[k], DMatrix::zeros(0, 0))
                .cholesky()
                .ok_or(self.order[k])?;
            let l_kk = chol.l();
            let col = std::mem::take(&mut sys.off[k]);
            let scaled: Vec<DMatrix<f64>> = col
                .into_iter()
                .map(|a_ik| {
                    let t = l_kk
                        .solve_lower_triangular(&a_ik.transpose())
                        .expect("cholesky factor has a positive diagonal");
                    t.transpose()
                })
                .collect();
            let rows = &self.col_rows[k];
            for (x, &j) in rows.iter().enumerate() {
                let l_jk_t = scaled[x].transpose();
                sys.diag[j] -= &scaled[x] * &l_jk_t;
                for (y, &i) in rows.iter().enumerate().skip(x + 1) {
                    let s = self.slot(i, j);
                    sys.off[j][s] -= &scaled[y] * &l_jk_t;
                }
            }
            sys.diag[k] = l_kk;
            sys.off[k] = scaled;
        }

        let mut y = sys.rhs;
        for k in 0..n {
            let yk = sys.diag[k]
                .solve_lower_triangular(&y[k])
                .expect("cholesky factor has a positive diagonal");
            for (x, &i) in self.col_rows[k].iter().enumerate() {
                y[i] -= &sys.off[k][x] * &yk;
            }
            y[k] = yk;
        }
        for k in (0..n).rev() {
            let mut acc = y[k].clone();
            for (x, &i) in self.col_rows[k].iter().enumerate() {
                acc -= sys.off[k][x].transpose() * &y[i];
            }
            y[k] = sys.diag[k]
                .transpose()
                .solve_upper_triangular(&acc)
                .expect("cholesky factor has a positive diagonal");
        }
        let mut out = vec![DVector::zeros(0); n];
        for (k, v) in y.into_iter().enumerate() {
            out[self.order[k]] = v;
        }
        Ok(out)
    }
}

pub(super) struct BlockSystem {
    diag: Vec<DMatrix<f64>>,
    off: Vec<Vec<DMatrix<f64>>>,
    rhs: Vec<DVector<f64>>,
}
