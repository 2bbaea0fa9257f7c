//! Compressed sparse row matrices for the graph propagation operator.

use crate::error::{Result, StgError};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct CsrMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Build from (row, col, value) triplets; duplicate entries are summed.
    pub fn from_triplets(n_rows: usize, n_cols: usize, mut entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        for &(r, c, _) in &entries {
            if r >= n_rows || c >= n_cols {
                return Err(StgError::Contract(format!(
                    "entry ({r},{c}) outside {n_rows}x{n_cols} matrix"
                )));
            }
        }
        entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
        // merge duplicates
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(entries.len());
        for (r, c, v) in entries {
            match merged.last_mut() {
                Some((lr, lc, lv)) if *lr == r && *lc == c => *lv += v,
                _ => merged.push((r, c, v)),
            }
        }
        let mut indptr = vec![0usize; n_rows + 1];
        for &(r, _, _) in &merged {
            indptr[r + 1] += 1;
        }
        for i in 0..n_rows {
            indptr[i + 1] += indptr[i];
        }
        let (indices, values) = merged.into_iter().map(|(_, c, v)| (c, v)).unzip();
        Ok(Self { n_rows, n_cols, indptr, indices, values })
    }

    pub fn from_dense(t: &Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(StgError::Shape(format!("expected rank-2 tensor, got {:?}", t.shape)));
        }
        let (n, m) = (t.shape[0], t.shape[1]);
        let mut entries = Vec::new();
        for i in 0..n {
            for j in 0..m {
                let v = t.data[i * m + j];
                if v != 0.0 {
                    entries.push((i, j, v));
                }
            }
        }
        Self::from_triplets(n, m, entries)
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(&[self.n_rows, self.n_cols]);
        for r in 0..self.n_rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                out.data[r * self.n_cols + self.indices[k]] += self.values[k];
            }
        }
        out
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.n_rows != self.n_cols {
            return false;
        }
        let dense = self.to_dense();
        let n = self.n_rows;
        for i in 0..n {
            for j in (i + 1)..n {
                if (dense.data[i * n + j] - dense.data[j * n + i]).abs() > tol {
                    return false;
                }
            }
        }
        true
    }

    /// y = A x for a dense vector. Returns the multiply-add count (= nnz).
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) -> u128 {
        debug_assert_eq!(x.len(), self.n_cols);
        debug_assert_eq!(y.len(), self.n_rows);
        for r in 0..self.n_rows {
            let mut acc = 0.0;
            for k in self.indptr[r]..self.indptr[r + 1] {
                acc += self.values[k] * x[self.indices[k]];
            }
            y[r] = acc;
        }
        self.nnz() as u128
    }

    /// Apply along the node axis of a [T, N, C] tensor:
    /// `out[t, i, c] = sum_j A[i, j] x[t, j, c]`.
    ///
    /// Returns (result, multiply-add count). The inner loop runs over the
    /// contiguous channel axis so each stored entry costs C madds.
    pub fn apply_tnc(&self, x: &Tensor) -> Result<(Tensor, u128)> {
        if x.rank() != 3 || x.shape[1] != self.n_cols {
            return Err(StgError::Shape(format!(
                "expected [T, {}, C] tensor, got {:?}",
                self.n_cols, x.shape
            )));
        }
        let (t_len, n, c) = (x.shape[0], x.shape[1], x.shape[2]);
        let mut out = Tensor::zeros(&[t_len, self.n_rows, c]);
        for t in 0..t_len {
            let x_slab = &x.data[t * n * c..(t + 1) * n * c];
            let out_slab = &mut out.data[t * self.n_rows * c..(t + 1) * self.n_rows * c];
            for r in 0..self.n_rows {
                let row_out = &mut out_slab[r * c..(r + 1) * c];
                for k in self.indptr[r]..self.indptr[r + 1] {
                    let w = self.values[k];
                    let src = &x_slab[self.indices[k] * c..(self.indices[k] + 1) * c];
                    for (o, s) in row_out.iter_mut().zip(src) {
                        *o += w * s;
                    }
                }
            }
        }
        let madds = (t_len as u128) * (self.nnz() as u128) * (c as u128);
        Ok((out, madds))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_mul_tnc(a: &Tensor, x: &Tensor) -> Tensor {
        let (t_len, n, c) = (x.shape[0], x.shape[1], x.shape[2]);
        let mut out = Tensor::zeros(&[t_len, n, c]);
        for t in 0..t_len {
            for i in 0..n {
                for j in 0..n {
                    let w = a.data[i * n + j];
                    for ch in 0..c {
                        out.data[(t * n + i) * c + ch] += w * x.data[(t * n + j) * c + ch];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn dense_round_trip() {
        let a = Tensor::from_vec(vec![2, 3], vec![1.0, 0.0, 2.0, 0.0, -3.0, 0.0]).unwrap();
        let csr = CsrMatrix::from_dense(&a).unwrap();
        assert_eq!(csr.nnz(), 3);
        assert_eq!(csr.to_dense().data, a.data);
    }

    #[test]
    fn matvec_matches_dense() {
        let mut rng = crate::rng::SplitMix64::new(3);
        let a = Tensor::rand_uniform(&[5, 5], -1.0, 1.0, &mut rng);
        let csr = CsrMatrix::from_dense(&a).unwrap();
        let x: Vec<f64> = (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut y = vec![0.0; 5];
        let madds = csr.matvec(&x, &mut y);
        assert_eq!(madds, csr.nnz() as u128);
        for i in 0..5 {
            let expect: f64 = (0..5).map(|j| a.data[i * 5 + j] * x[j]).sum();
            assert!((y[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn apply_tnc_matches_dense_per_slice() {
        let mut rng = crate::rng::SplitMix64::new(9);
        // sparse-ish matrix
        let mut a = Tensor::zeros(&[6, 6]);
        for i in 0..6 {
            for j in 0..6 {
                if rng.next_f64() < 0.4 {
                    a.data[i * 6 + j] = rng.uniform(-1.0, 1.0);
                }
            }
        }
        let csr = CsrMatrix::from_dense(&a).unwrap();
        let x = Tensor::rand_uniform(&[3, 6, 4], -1.0, 1.0, &mut rng);
        let (got, madds) = csr.apply_tnc(&x).unwrap();
        let want = dense_mul_tnc(&a, &x);
        assert_eq!(madds, 3 * csr.nnz() as u128 * 4);
        for (g, w) in got.data.iter().zip(&want.data) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn triplets_sum_duplicates() {
        let csr = CsrMatrix::from_triplets(2, 2, vec![(0, 1, 1.0), (0, 1, 2.5), (1, 0, 1.0)]).unwrap();
        assert_eq!(csr.nnz(), 2);
        assert_eq!(csr.to_dense().data, vec![0.0, 3.5, 1.0, 0.0]);
    }
}
