//! Renormalized adjacency `Â = D̃^{-1/2} (A + I) D̃^{-1/2}`.

use ndarray::{Array2, ArrayView2};
use sha2::{Digest, Sha256};

use crate::dataset::GraphDataset;
use crate::error::Result;
use crate::sparse::SparseMatrix;

/// The propagation matrix shared by both graph convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    matrix: SparseMatrix,
    source_hash: [u8; 32],
}

impl NormalizedAdjacency {
    /// Normalizes an arbitrary binary symmetric adjacency with empty diagonal.
    pub fn from_adjacency(adjacency: &SparseMatrix) -> Self {
        let n = adjacency.rows();
        // d̃_i = 1 + deg_i once the self-loop is added.
        let inv_sqrt_deg: Vec<f64> = (0..n)
            .map(|i| {
                let (_, vals) = adjacency.row(i);
                1.0 / (1.0 + vals.iter().sum::<f64>()).sqrt()
            })
            .collect();

        let mut row_offsets = Vec::with_capacity(n + 1);
        let mut col_indices = Vec::with_capacity(adjacency.nnz() + n);
        let mut values = Vec::with_capacity(adjacency.nnz() + n);
        row_offsets.push(0);
        for i in 0..n {
            let (cols, vals) = adjacency.row(i);
            let mut self_loop_done = false;
            for (&j, &a) in cols.iter().zip(vals) {
                if !self_loop_done && j > i {
                    col_indices.push(i);
                    values.push(inv_sqrt_deg[i] * inv_sqrt_deg[i]);
                    self_loop_done = true;
                }
                let a = if j == i { a + 1.0 } else { a };
                if j == i {
                    self_loop_done = true;
                }
                col_indices.push(j);
                values.push(a * inv_sqrt_deg[i] * inv_sqrt_deg[j]);
            }
            if !self_loop_done {
                col_indices.push(i);
                values.push(inv_sqrt_deg[i] * inv_sqrt_deg[i]);
            }
            row_offsets.push(col_indices.len());
        }
        let matrix = SparseMatrix::from_csr(n, n, row_offsets, col_indices, values)
            .expect("normalized adjacency is structurally valid");
        Self { matrix, source_hash: digest(adjacency) }
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }

    pub fn source_hash(&self) -> &[u8; 32] {
        &self.source_hash
    }

    pub fn num_nodes(&self) -> usize {
        self.matrix.rows()
    }

    /// `Â · rhs`. Since `Â` is symmetric this is also `Âᵀ · rhs`.
    pub fn propagate(&self, rhs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.matrix.mul_dense(rhs)
    }
}

/// Builds `Â` for a dataset's graph.
pub fn build_normalized_adjacency(dataset: &GraphDataset) -> NormalizedAdjacency {
    NormalizedAdjacency::from_adjacency(&dataset.adjacency)
}

fn digest(m: &SparseMatrix) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((m.rows() as u64).to_le_bytes());
    h.update((m.cols() as u64).to_le_bytes());
    for &o in m.row_offsets() {
        h.update((o as u64).to_le_bytes());
    }
    for &c in m.col_indices() {
        h.update((c as u64).to_le_bytes());
    }
    for &v in m.values() {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}
