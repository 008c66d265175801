//! Compressed sparse row operators with fixed (non-trainable) edge weights,
//! plus the destination-grouped edge index used by attention layers.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sparse matrix in CSR form. Weights are constants of the operator; they are
/// never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseOperator {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseOperator {
    /// Builds from (row, col, weight) triplets. Entries are sorted per row;
    /// duplicates are rejected.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self> {
        for &(r, c, _) in triplets {
            if r >= n_rows {
                return Err(Error::NodeOutOfRange {
                    id: r,
                    num_nodes: n_rows,
                });
            }
            if c >= n_cols {
                return Err(Error::NodeOutOfRange {
                    id: c,
                    num_nodes: n_cols,
                });
            }
        }
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by_key(|&(r, c, _)| (r, c));
        for pair in sorted.windows(2) {
            if pair[0].0 == pair[1].0 && pair[0].1 == pair[1].1 {
                return Err(Error::InvalidParameter {
                    name: "triplets",
                    reason: format!("duplicate entry ({}, {})", pair[0].0, pair[0].1),
                });
            }
        }
        let mut row_offsets = vec![0usize; n_rows + 1];
        for &(r, _, _) in &sorted {
            row_offsets[r + 1] += 1;
        }
        for i in 0..n_rows {
            row_offsets[i + 1] += row_offsets[i];
        }
        let col_indices = sorted.iter().map(|&(_, c, _)| c).collect();
        let weights = sorted.iter().map(|&(_, _, w)| w).collect();
        Ok(SparseOperator {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
            weights,
        })
    }

    /// Identity operator of size n (unit self-loops).
    pub fn identity(n: usize) -> Self {
        SparseOperator {
            n_rows: n,
            n_cols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            weights: vec![1.0; n],
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let lo = self.row_offsets[i];
        let hi = self.row_offsets[i + 1];
        (&self.col_indices[lo..hi], &self.weights[lo..hi])
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        let (_, w) = self.row(i);
        w.iter().sum()
    }

    /// out = S @ x
    pub fn matmul_dense(&self, x: &Tensor) -> Result<Tensor> {
        if self.n_cols != x.rows() {
            return Err(Error::shape(
                "spmm",
                format!("{}x{}", self.n_rows, self.n_cols),
                x.shape_string(),
            ));
        }
        let d = x.cols();
        let mut out = Tensor::zeros(self.n_rows, d);
        for i in 0..self.n_rows {
            let (cols, weights) = self.row(i);
            let out_row = out.row_mut(i);
            for (&j, &w) in cols.iter().zip(weights) {
                let x_row = x.row(j);
                for k in 0..d {
                    out_row[k] += w * x_row[k];
                }
            }
        }
        Ok(out)
    }

    /// out = S^T @ x, computed by scattering rows; no transpose materialized.
    pub fn transpose_matmul_dense(&self, x: &Tensor) -> Result<Tensor> {
        if self.n_rows != x.rows() {
            return Err(Error::shape(
                "spmm_t",
                format!("{}x{}", self.n_cols, self.n_rows),
                x.shape_string(),
            ));
        }
        let d = x.cols();
        let mut out = Tensor::zeros(self.n_cols, d);
        for i in 0..self.n_rows {
            let (cols, weights) = self.row(i);
            let x_row = x.row(i).to_vec();
            for (&j, &w) in cols.iter().zip(weights) {
                let out_row = out.row_mut(j);
                for k in 0..d {
                    out_row[k] += w * x_row[k];
                }
            }
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(self.n_rows, self.n_cols);
        for i in 0..self.n_rows {
            let (cols, weights) = self.row(i);
            for (&j, &w) in cols.iter().zip(weights) {
                out.set(i, j, w);
            }
        }
        out
    }
}

/// Directed edge array grouped by destination node, including self-loops.
/// Segment k covers the incoming edges of node k; segments are the unit of
/// attention normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeIndex {
    src: Vec<usize>,
    dst: Vec<usize>,
    seg_offsets: Vec<usize>,
    num_nodes: usize,
}

impl EdgeIndex {
    /// Builds from directed (src, dst) pairs. Pairs are sorted by (dst, src).
    pub fn new(num_nodes: usize, mut pairs: Vec<(usize, usize)>) -> Result<Self> {
        for &(s, d) in &pairs {
            if s >= num_nodes {
                return Err(Error::NodeOutOfRange {
                    id: s,
                    num_nodes,
                });
            }
            if d >= num_nodes {
                return Err(Error::NodeOutOfRange {
                    id: d,
                    num_nodes,
                });
            }
        }
        pairs.sort_by_key(|&(s, d)| (d, s));
        let mut seg_offsets = vec![0usize; num_nodes + 1];
        for &(_, d) in &pairs {
            seg_offsets[d + 1] += 1;
        }
        for i in 0..num_nodes {
            seg_offsets[i + 1] += seg_offsets[i];
        }
        let src = pairs.iter().map(|&(s, _)| s).collect();
        let dst = pairs.iter().map(|&(_, d)| d).collect();
        Ok(EdgeIndex {
            src,
            dst,
            seg_offsets,
            num_nodes,
        })
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn src(&self) -> &[usize] {
        &self.src
    }

    pub fn dst(&self) -> &[usize] {
        &self.dst
    }

    /// Edge range [lo, hi) of the segment whose destination is `node`.
    pub fn segment(&self, node: usize) -> (usize, usize) {
        (self.seg_offsets[node], self.seg_offsets[node + 1])
    }

    pub fn segments(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.seg_offsets.windows(2).map(|w| (w[0], w[1]))
    }
}
