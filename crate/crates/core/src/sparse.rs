//! Compressed sparse row matrices and the handful of kernels the model needs.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// A real matrix in compressed sparse row layout.
///
/// Column indices within a row are strictly increasing and no explicit zeros
/// are stored. Both properties are established by [`SparseMatrix::from_triplets`]
/// and checked by [`SparseMatrix::from_csr`].
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds a matrix from `(row, col, value)` triplets.
    ///
    /// Duplicate coordinates are summed, and entries whose final value is
    /// exactly zero are pruned.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut entries: Vec<(usize, usize, f64)> = Vec::new();
        for (r, c, v) in triplets {
            if r >= rows || c >= cols {
                return Err(Error::IndexOutOfRange {
                    what: "matrix entry",
                    index: if r >= rows { r } else { c },
                    bound: if r >= rows { rows } else { cols },
                });
            }
            if !v.is_finite() {
                return Err(Error::NonFinite("matrix entry"));
            }
            entries.push((r, c, v));
        }
        entries.sort_unstable_by_key(|&(r, c, _)| (r, c));

        let mut row_offsets = vec![0usize; rows + 1];
        let mut col_indices = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        let mut iter = entries.into_iter().peekable();
        while let Some((r, c, mut v)) = iter.next() {
            while let Some(&(r2, c2, v2)) = iter.peek() {
                if r2 == r && c2 == c {
                    v += v2;
                    iter.next();
                } else {
                    break;
                }
            }
            if v != 0.0 {
                row_offsets[r + 1] += 1;
                col_indices.push(c);
                values.push(v);
            }
        }
        for i in 0..rows {
            row_offsets[i + 1] += row_offsets[i];
        }
        Ok(Self { rows, cols, row_offsets, col_indices, values })
    }

    /// Wraps raw CSR arrays after validating every structural invariant.
    pub fn from_csr(
        rows: usize,
        cols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let bad = |msg: &str| Error::InvalidMatrix(msg.to_string());
        if row_offsets.len() != rows + 1 || row_offsets[0] != 0 {
            return Err(bad("row_offsets must have rows + 1 entries starting at 0"));
        }
        if *row_offsets.last().unwrap() != values.len() || col_indices.len() != values.len() {
            return Err(bad("row_offsets must end at the number of stored values"));
        }
        for r in 0..rows {
            let (lo, hi) = (row_offsets[r], row_offsets[r + 1]);
            if lo > hi {
                return Err(bad("row_offsets must be nondecreasing"));
            }
            let cols_in_row = &col_indices[lo..hi];
            if cols_in_row.iter().any(|&c| c >= cols) {
                return Err(bad("column index out of range"));
            }
            if cols_in_row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(bad("column indices must be strictly increasing within a row"));
            }
        }
        if values.iter().any(|&v| v == 0.0 || !v.is_finite()) {
            return Err(bad("stored values must be finite and nonzero"));
        }
        Ok(Self { rows, cols, row_offsets, col_indices, values })
    }

    /// The `n × n` identity.
    pub fn identity(n: usize) -> Self {
        Self { rows: n, cols: n, row_offsets: (0..=n).collect(), col_indices: (0..n).collect(), values: vec![1.0; n] }
    }

    /// Converts a dense matrix, dropping zeros.
    pub fn from_dense(dense: ArrayView2<'_, f64>) -> Result<Self> {
        let (rows, cols) = dense.dim();
        Self::from_triplets(rows, cols, dense.indexed_iter().map(|((r, c), &v)| (r, c, v)))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column indices and values of one row.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (lo, hi) = (self.row_offsets[r], self.row_offsets[r + 1]);
        (&self.col_indices[lo..hi], &self.values[lo..hi])
    }

    /// Value at `(r, c)`, zero when not stored.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&c) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    /// Iterates `(row, col, value)` over stored entries in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(move |(&c, &v)| (r, c, v))
        })
    }

    /// Row index of every stored entry, aligned with [`Self::values`].
    pub fn entry_rows(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            out.extend(std::iter::repeat_n(r, self.row_offsets[r + 1] - self.row_offsets[r]));
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows, self.cols));
        for (r, c, v) in self.iter() {
            out[[r, c]] = v;
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.col_indices {
            counts[c + 1] += 1;
        }
        for i in 0..self.cols {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut col_indices = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for (r, c, v) in self.iter() {
            let slot = next[c];
            col_indices[slot] = r;
            values[slot] = v;
            next[c] += 1;
        }
        Self { rows: self.cols, cols: self.rows, row_offsets: counts, col_indices, values }
    }

    /// `self · rhs` for a dense right-hand side.
    pub fn mul_dense(&self, rhs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.mul_dense_with_values(&self.values, rhs)
    }

    /// `self · rhs` where the stored values are replaced by `values`
    /// (same sparsity pattern, one value per stored entry).
    pub fn mul_dense_with_values(&self, values: &[f64], rhs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if rhs.nrows() != self.cols {
            return Err(Error::ShapeMismatch { op: "sparse × dense", left: self.shape(), right: rhs.dim() });
        }
        debug_assert_eq!(values.len(), self.nnz());
        let k = rhs.ncols();
        let mut out = Array2::zeros((self.rows, k));
        for r in 0..self.rows {
            let (lo, hi) = (self.row_offsets[r], self.row_offsets[r + 1]);
            let mut out_row = out.row_mut(r);
            for idx in lo..hi {
                let v = values[idx];
                let rhs_row = rhs.row(self.col_indices[idx]);
                out_row.zip_mut_with(&rhs_row, |o, &x| *o += v * x);
            }
        }
        Ok(out)
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub fn transpose_mul_dense(&self, rhs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.transpose_mul_dense_with_values(&self.values, rhs)
    }

    /// `selfᵀ · rhs` with substituted values, as in [`Self::mul_dense_with_values`].
    pub fn transpose_mul_dense_with_values(&self, values: &[f64], rhs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if rhs.nrows() != self.rows {
            return Err(Error::ShapeMismatch {
                op: "sparseᵀ × dense", left: (self.cols, self.rows), right: rhs.dim()
            });
        }
        debug_assert_eq!(values.len(), self.nnz());
        let k = rhs.ncols();
        let mut out = Array2::zeros((self.cols, k));
        for r in 0..self.rows {
            let (lo, hi) = (self.row_offsets[r], self.row_offsets[r + 1]);
            let rhs_row = rhs.row(r);
            for idx in lo..hi {
                let v = values[idx];
                let mut out_row = out.row_mut(self.col_indices[idx]);
                out_row.zip_mut_with(&rhs_row, |o, &x| *o += v * x);
            }
        }
        Ok(out)
    }

    /// True when the matrix equals its transpose within `tol`.
    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        self.iter().all(|(r, c, v)| {
            let (cols, _) = self.row(c);
            cols.binary_search(&r).is_ok() && (self.get(c, r) - v).abs() <= tol
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn triplets_sum_duplicates_and_prune_zeros() {
        let m =
            SparseMatrix::from_triplets(2, 3, vec![(0, 2, 1.0), (0, 0, 2.0), (0, 2, 1.5), (1, 1, 3.0), (1, 1, -3.0)])
                .unwrap();
        assert_eq!(m.row_offsets(), &[0, 2, 2]);
        assert_eq!(m.col_indices(), &[0, 2]);
        assert_eq!(m.values(), &[2.0, 2.5]);
    }

    #[test]
    fn out_of_range_triplet_is_rejected() {
        let err = SparseMatrix::from_triplets(2, 2, vec![(0, 5, 1.0)]).unwrap_err();
        assert!(matches!(err, Error::IndexOutOfRange { index: 5, bound: 2, .. }));
    }

    #[test]
    fn from_csr_checks_structure() {
        assert!(SparseMatrix::from_csr(1, 3, vec![0, 2], vec![2, 1], vec![1.0, 1.0]).is_err());
        assert!(SparseMatrix::from_csr(1, 3, vec![0, 1], vec![1], vec![0.0]).is_err());
        assert!(SparseMatrix::from_csr(2, 3, vec![0, 1], vec![1], vec![1.0]).is_err());
        assert!(SparseMatrix::from_csr(1, 3, vec![0, 2], vec![0, 2], vec![1.0, 4.0]).is_ok());
    }

    #[test]
    fn products_match_dense() {
        let dense = array![[1.0, 0.0, 2.0], [0.0, 0.0, 0.0], [0.0, -1.0, 4.0]];
        let m = SparseMatrix::from_dense(dense.view()).unwrap();
        let rhs = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        assert_eq!(m.mul_dense(rhs.view()).unwrap(), dense.dot(&rhs));
        assert_eq!(m.transpose_mul_dense(rhs.view()).unwrap(), dense.t().dot(&rhs));
        assert_eq!(m.transpose().to_dense(), dense.t().to_owned());
        assert!(m.mul_dense(array![[1.0]].view()).is_err());
    }

    #[test]
    fn symmetry_check() {
        let sym = SparseMatrix::from_dense(array![[0.0, 1.0], [1.0, 0.0]].view()).unwrap();
        let asym = SparseMatrix::from_dense(array![[0.0, 1.0], [0.0, 0.0]].view()).unwrap();
        assert!(sym.is_symmetric(0.0));
        assert!(!asym.is_symmetric(0.0));
    }
}
