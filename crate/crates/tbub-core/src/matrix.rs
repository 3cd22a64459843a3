//! Dense row-major f64 matrix with the handful of kernels the tape needs.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Dense 2-D array of f64, row-major. Every tape value is one of these;
/// vectors are represented as n x 1 or 1 x n matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "data length {} != {rows}x{cols}",
            data.len()
        );
        Matrix { rows, cols, data }
    }

    /// Column vector from a slice.
    pub fn col(values: &[f64]) -> Self {
        Matrix::from_vec(values.len(), 1, values.to_vec())
    }

    /// Row vector from a slice.
    pub fn row(values: &[f64]) -> Self {
        Matrix::from_vec(1, values.len(), values.to_vec())
    }

    pub fn eye(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Entries drawn i.i.d. from Normal(0, std).
    pub fn randn<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("std must be finite and positive");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_slice_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn check_matmul(&self, other: &Matrix) -> Result<()> {
        if self.cols != other.rows {
            return Err(Error::Dim(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    /// self . other
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!(self.cols, other.rows);
        let (m, n) = (self.rows, other.cols);
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            let arow = self.row_slice(i);
            let orow = out.row_slice_mut(i);
            for (p, &av) in arow.iter().enumerate() {
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        out
    }

    /// self . other^T (transposing first keeps the inner loop contiguous).
    pub fn matmul_nt(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!(self.cols, other.cols);
        self.matmul(&other.transpose())
    }

    /// self^T . other without materializing the transpose.
    pub fn matmul_tn(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!(self.rows, other.rows);
        let (m, k, n) = (self.cols, self.rows, other.cols);
        let mut out = Matrix::zeros(m, n);
        for p in 0..k {
            let arow = self.row_slice(p);
            let brow = other.row_slice(p);
            for (i, &av) in arow.iter().enumerate() {
                let orow = &mut out.data[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, c: f64) {
        for a in self.data.iter_mut() {
            *a *= c;
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Stable log(sum(exp(x))) over a slice of log-weights.
///
/// Errors on empty input; returns the element itself for a single entry.
pub fn logsumexp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptyInput("logsumexp"));
    }
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        if max == f64::NEG_INFINITY {
            // All entries are -inf: the sum of zeros.
            return Ok(f64::NEG_INFINITY);
        }
        return Ok(max);
    }
    if xs.len() == 1 {
        return Ok(xs[0]);
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_identity_passthrough() {
        let m = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = Matrix::eye(2).matmul(&m);
        assert_eq!(out, m);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Matrix::from_vec(2, 1, vec![1.0, 1.0]);
        let out = a.matmul(&b);
        assert_eq!(out.data, vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Matrix::randn(5, 4, 1.0, &mut rng);
        let b = Matrix::randn(4, 6, 1.0, &mut rng);
        let direct = a.matmul(&b);
        let via_nt = a.matmul_nt(&b.transpose());
        let via_tn = a.transpose().matmul_tn(&b);
        assert!(direct.max_abs_diff(&via_nt) < 1e-12);
        assert!(direct.max_abs_diff(&via_tn) < 1e-12);
    }

    #[test]
    fn logsumexp_single_element_exact() {
        assert_eq!(logsumexp(&[-3.25]).unwrap(), -3.25);
    }

    #[test]
    fn logsumexp_ln2() {
        let v = logsumexp(&[0.0, 0.0]).unwrap();
        assert!((v - 2.0_f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn logsumexp_empty_errors() {
        assert!(logsumexp(&[]).is_err());
    }

    #[test]
    fn logsumexp_matches_naive_and_dominates_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let xs: Vec<f64> = (0..8).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
            let stable = logsumexp(&xs).unwrap();
            let rel = (stable - naive).abs() / naive.abs().max(1e-300);
            assert!(rel < 1e-12, "rel err {rel}");
            let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(stable >= max);
        }
    }
}
