use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("Matrix::from_vec", (rows, cols), data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    /// New matrix made of the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks matrices with equal column counts.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::shape("Matrix::vstack", cols, p.cols));
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bitwise_eq(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// `out[i] = W · x_i + b` for each row `x_i` of `x`.
pub fn linear_forward(w: &Matrix, b: &[f64], x: &Matrix) -> Result<Matrix> {
    if w.cols() != x.cols() {
        return Err(Error::shape("linear_forward (W vs x)", w.shape(), x.shape()));
    }
    if b.len() != w.rows() {
        return Err(Error::shape("linear_forward (W vs b)", w.shape(), b.len()));
    }
    let mut out = Matrix::zeros(x.rows(), w.rows());
    linear_into(w.as_slice(), b, x, w.rows(), &mut out);
    Ok(out)
}

/// Kernel behind [`linear_forward`]; `w` is `out_dim × x.cols()` row-major.
pub(crate) fn linear_into(w: &[f64], b: &[f64], x: &Matrix, out_dim: usize, out: &mut Matrix) {
    let in_dim = x.cols();
    for i in 0..x.rows() {
        let xi = x.row(i);
        let oi = out.row_mut(i);
        for (o, slot) in oi.iter_mut().enumerate().take(out_dim) {
            let wr = &w[o * in_dim..(o + 1) * in_dim];
            *slot = dot(wr, xi) + b[o];
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn relu_forward(x: &Matrix) -> Matrix {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Subgradient of ReLU: 1 for positive inputs, 0 otherwise (including 0).
#[inline]
pub fn relu_grad(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Temperature-scaled softmax with max subtraction.
pub fn softmax(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    Ok(softmax_unchecked(logits, tau))
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("temperature must be > 0, got {tau}")));
    }
    Ok(())
}

pub(crate) fn softmax_unchecked(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| ((z - max) / tau).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// `log softmax(logits / tau)` through log-sum-exp.
pub fn log_softmax(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    Ok(log_softmax_unchecked(logits, tau))
}

pub(crate) fn log_softmax_unchecked(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits
        .iter()
        .map(|&z| ((z - max) / tau).exp())
        .sum::<f64>()
        .ln();
    logits.iter().map(|&z| (z - max) / tau - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_linear() {
        let x = Matrix::from_rows(&[vec![3.0, -1.0]]).unwrap();
        let y = linear_forward(&Matrix::identity(2), &[0.0, 0.0], &x).unwrap();
        assert_eq!(y.row(0), &[3.0, -1.0]);
    }

    #[test]
    fn hand_product() {
        // [[1,1],[0,2]]·(2,3) + (1,0) = (5+1, 6+0)
        let w = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 2.0]]).unwrap();
        let x = Matrix::from_rows(&[vec![2.0, 3.0]]).unwrap();
        let y = linear_forward(&w, &[1.0, 0.0], &x).unwrap();
        assert_eq!(y.row(0), &[6.0, 6.0]);
    }

    #[test]
    fn linear_shape_mismatch_names_both_shapes() {
        let w = Matrix::zeros(2, 3);
        let x = Matrix::zeros(4, 2);
        let err = linear_forward(&w, &[0.0, 0.0], &x).unwrap_err().to_string();
        assert!(err.contains("(2, 3)") && err.contains("(4, 2)"), "{err}");
    }

    #[test]
    fn relu_cases() {
        let x = Matrix::from_rows(&[vec![-1.0, 0.0, 2.0]]).unwrap();
        assert_eq!(relu_forward(&x).row(0), &[0.0, 0.0, 2.0]);
        let pos = Matrix::from_rows(&[vec![0.5, 1.0, 3.0]]).unwrap();
        assert_eq!(relu_forward(&pos), pos);
        assert_eq!(relu_grad(0.0), 0.0);
    }

    #[test]
    fn relu_gradient_matches_finite_differences_away_from_zero() {
        let eps = 1e-6;
        for &v in &[-2.0, -0.3, 0.4, 1.7] {
            let fd = (f64::max(v + eps, 0.0) - f64::max(v - eps, 0.0)) / (2.0 * eps);
            assert!((fd - relu_grad(v)).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[2.5, 2.5, 2.5], 0.7).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[1.0, 0.0], 1.0).unwrap();
        assert!((p[0] - 0.73106).abs() < 1e-5 && (p[1] - 0.26894).abs() < 1e-5);
        let p = softmax(&[1000.0, 0.0], 1.0).unwrap();
        assert_eq!(p, vec![1.0, 0.0]);
        assert!(softmax(&[1.0], 0.0).is_err());
        assert!(softmax(&[1.0], -1.0).is_err());
    }

    proptest! {
        #[test]
        fn softmax_is_a_shift_invariant_distribution(
            logits in prop::collection::vec(-50.0f64..50.0, 2..12),
            shift in -100.0f64..100.0,
            tau in 0.1f64..10.0,
        ) {
            let p = softmax(&logits, tau).unwrap();
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
            let q = softmax(&shifted, tau).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let lp = log_softmax(&logits, tau).unwrap();
            for (a, b) in p.iter().zip(&lp) {
                prop_assert!((a.ln() - b).abs() < 1e-9 || *a < 1e-300);
            }
        }
    }
}
