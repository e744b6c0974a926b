//! Dense 64-bit float tensors, rank 1 or 2, row-major.
//!
//! This is the value type carried through the autodiff tape and the eager
//! evaluation paths. All math that also needs a gradient lives in
//! [`crate::tape`]; the methods here are plain forward kernels shared by
//! both paths so the numbers are identical.

use crate::error::{CoreError, Result};

/// Row-major dense array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(CoreError::shape("tensor", format!("rank must be 1 or 2, got {:?}", shape)));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(CoreError::shape("tensor", format!("zero-sized dimension in {:?}", shape)));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(CoreError::shape(
                "tensor",
                format!("shape {:?} expects {} values, got {}", shape, numel, values.len()),
            ));
        }
        Ok(Tensor { shape, values })
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn vector(values: Vec<f64>) -> Self {
        let n = values.len();
        Tensor { shape: vec![n], values }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], values: vec![v] }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, values: vec![0.0; numel] }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor { shape: other.shape.clone(), values: vec![0.0; other.values.len()] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(CoreError::shape("tensor", "from_rows needs at least one row"));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(CoreError::shape("tensor", "rows have unequal lengths"));
        }
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            values.extend_from_slice(r);
        }
        Tensor::matrix(rows.len(), cols, values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Rows when viewed as a matrix; a rank-1 tensor is one row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Columns when viewed as a matrix.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), values: self.values.iter().map(|&v| f(v)).collect() }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(CoreError::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        Ok(Tensor { shape: self.shape.clone(), values })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(Tensor { shape: self.shape.clone(), values })
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a * b).collect();
        Ok(Tensor { shape: self.shape.clone(), values })
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    /// `self (n x k) . rhs (k x m)`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (n, k) = (self.rows(), self.cols());
        let (k2, m) = (rhs.rows(), rhs.cols());
        if k != k2 {
            return Err(CoreError::shape("matmul", format!("inner dims {} vs {}", k, k2)));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = self.row(i);
            let o_row = &mut out[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = rhs.row(p);
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::matrix(n, m, out)
    }

    /// `self (n x k) . rhs^T (m x k)` without materializing the transpose.
    pub fn matmul_nt(&self, rhs: &Tensor) -> Result<Tensor> {
        let (n, k) = (self.rows(), self.cols());
        let (m, k2) = (rhs.rows(), rhs.cols());
        if k != k2 {
            return Err(CoreError::shape("matmul_nt", format!("inner dims {} vs {}", k, k2)));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = self.row(i);
            for j in 0..m {
                let b_row = rhs.row(j);
                let mut acc = 0.0;
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                out[i * m + j] = acc;
            }
        }
        Tensor::matrix(n, m, out)
    }

    /// `self^T (k x n) . rhs (n x m)`; used by matmul gradients.
    pub fn matmul_tn(&self, rhs: &Tensor) -> Result<Tensor> {
        let (n, k) = (self.rows(), self.cols());
        let (n2, m) = (rhs.rows(), rhs.cols());
        if n != n2 {
            return Err(CoreError::shape("matmul_tn", format!("outer dims {} vs {}", n, n2)));
        }
        let mut out = vec![0.0; k * m];
        for i in 0..n {
            let a_row = self.row(i);
            let b_row = rhs.row(i);
            for (p, &a) in a_row.iter().enumerate() {
                let o_row = &mut out[p * m..(p + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::matrix(k, m, out)
    }

    /// Add a row vector to every row.
    pub fn add_row_broadcast(&self, row: &Tensor) -> Result<Tensor> {
        let m = self.cols();
        if row.numel() != m {
            return Err(CoreError::shape(
                "add_row_broadcast",
                format!("row has {} entries, matrix has {} columns", row.numel(), m),
            ));
        }
        let mut values = self.values.clone();
        for chunk in values.chunks_mut(m) {
            for (v, &b) in chunk.iter_mut().zip(row.values()) {
                *v += b;
            }
        }
        Ok(Tensor { shape: self.shape.clone(), values })
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    /// Rows rescaled to unit Euclidean norm. A zero row stays zero.
    pub fn row_l2_normalized(&self) -> Tensor {
        let m = self.cols();
        let mut values = self.values.clone();
        for chunk in values.chunks_mut(m) {
            let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in chunk.iter_mut() {
                    *v /= norm;
                }
            }
        }
        Tensor { shape: self.shape.clone(), values }
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax_rows(&self) -> Tensor {
        let m = self.cols();
        let mut values = self.values.clone();
        for chunk in values.chunks_mut(m) {
            let max = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + chunk.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in chunk.iter_mut() {
                *v -= lse;
            }
        }
        Tensor { shape: self.shape.clone(), values }
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructors_validate_shape() {
        assert!(Tensor::matrix(2, 3, vec![0.0; 6]).is_ok());
        assert!(Tensor::matrix(2, 3, vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.values(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 1.0, -1.0]).unwrap();
        let b = Tensor::matrix(4, 3, vec![0.5, 1.0, 2.0, -1.0, 0.0, 1.0, 2.0, 2.0, 2.0, 0.0, -3.0, 1.0]).unwrap();
        // a . b^T via matmul_nt equals explicit transpose multiply
        let nt = a.matmul_nt(&b).unwrap();
        let mut bt = vec![0.0; 12];
        for i in 0..4 {
            for j in 0..3 {
                bt[j * 4 + i] = b.get2(i, j);
            }
        }
        let bt = Tensor::matrix(3, 4, bt).unwrap();
        let direct = a.matmul(&bt).unwrap();
        assert_eq!(nt.values(), direct.values());
    }

    #[test]
    fn normalization_produces_unit_rows_and_keeps_zero_rows() {
        let t = Tensor::matrix(2, 3, vec![3.0, 0.0, 4.0, 0.0, 0.0, 0.0]).unwrap();
        let n = t.row_l2_normalized();
        let r0: f64 = n.row(0).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((r0 - 1.0).abs() < 1e-12);
        assert_eq!(n.row(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn log_softmax_row_sums_to_one_after_exp() {
        let t = Tensor::matrix(1, 3, vec![1000.0, 0.0, -1000.0]).unwrap();
        let ls = t.log_softmax_rows();
        let total: f64 = ls.values().iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(ls.is_finite());
    }
}
