//! Dense 2-D tensors of 64-bit floats, row-major.
//!
//! The unit of all differentiable computation. Shapes are checked at every
//! operation boundary; scalars are 1x1 tensors.

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor[{}x{}]", self.rows, self.cols)?;
        if self.values.len() <= 16 {
            write!(f, " {:?}", self.values)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            values: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::shape(
                "from_vec",
                format!("{}x{}", rows, cols),
                format!("{} values", values.len()),
            ));
        }
        Ok(Tensor { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::shape(
                    "from_rows",
                    format!("row of {}", c),
                    format!("row of {}", row.len()),
                ));
            }
            values.extend_from_slice(row);
        }
        Ok(Tensor {
            rows: r,
            cols: c,
            values,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            values: vec![value],
        }
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

    pub fn shape_string(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    /// Value of a 1x1 tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::NonScalarLoss {
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(self.values[0])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// New tensor whose rows are `self`'s rows at `indices`, in order.
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor {
        let mut values = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Tensor {
            rows: indices.len(),
            cols: self.cols,
            values,
        }
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.values[j * self.rows + i] = self.values[i * self.cols + j];
            }
        }
        out
    }

    /// `self @ other`. Inner loop skips zero left-hand entries, which makes
    /// products against sparse feature matrices cheap.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                self.shape_string(),
                other.shape_string(),
            ));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let a_row = &self.values[i * k..(i + 1) * k];
            let c_row = &mut out.values[i * n..(i + 1) * n];
            for (kk, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.values[kk * n..(kk + 1) * n];
                for j in 0..n {
                    c_row[j] += a * b_row[j];
                }
            }
        }
        Ok(out)
    }

    /// `self @ other^T` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_nt",
                self.shape_string(),
                other.shape_string(),
            ));
        }
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let a_row = &self.values[i * k..(i + 1) * k];
            let c_row = &mut out.values[i * n..(i + 1) * n];
            for (j, c) in c_row.iter_mut().enumerate() {
                let b_row = &other.values[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a_row[kk] * b_row[kk];
                }
                *c = acc;
            }
        }
        Ok(out)
    }

    /// `self^T @ other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "matmul_tn",
                self.shape_string(),
                other.shape_string(),
            ));
        }
        let (m, k, n) = (self.cols, self.rows, other.cols);
        let mut out = Tensor::zeros(m, n);
        for kk in 0..k {
            let a_row = &self.values[kk * m..(kk + 1) * m];
            let b_row = &other.values[kk * n..(kk + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let c_row = &mut out.values[i * n..(i + 1) * n];
                for j in 0..n {
                    c_row[j] += a * b_row[j];
                }
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape(
                "add_assign",
                self.shape_string(),
                other.shape_string(),
            ));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Naive triple-loop product, the oracle for the fast path.
    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(a.matmul(&eye).unwrap(), a);
    }

    #[test]
    fn matmul_swap() {
        // Expected values computed by the triple-loop oracle.
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let expect = matmul_oracle(&a, &b);
        assert_eq!(
            expect.values(),
            &[2.0, 1.0, 4.0, 3.0],
            "oracle disagrees with frozen values"
        );
        assert_eq!(a.matmul(&b).unwrap(), expect);
    }

    #[test]
    fn matmul_dimension_mismatch_names_shapes() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("2x3"), "error should name shapes: {err}");
    }

    #[test]
    fn transposed_variants_match_explicit_transpose() {
        let a = Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.0, 3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![2.0, 1.0, -1.0], vec![0.5, 0.0, 2.0]]).unwrap();
        let nt = a.matmul_nt(&b).unwrap();
        assert_eq!(nt, matmul_oracle(&a, &b.transpose()));
        let tn = a.matmul_tn(&b).unwrap();
        assert_eq!(tn, matmul_oracle(&a.transpose(), &b));
    }

    #[test]
    fn gather_rows_reorders() {
        let a = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let g = a.gather_rows(&[2, 0]);
        assert_eq!(g.values(), &[3.0, 1.0]);
    }

    #[test]
    fn from_vec_length_checked() {
        assert!(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0]).is_err());
    }
}
