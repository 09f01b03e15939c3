//! Banded AR smoothness operator on the temporal factor.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::AggregatedCoefficients;

/// `I × I` matrix whose row `r` (0-based) has `1` at column `r − p` and
/// `−α_j` at column `r − p + j`, dropping columns below zero. Rows `r ≥ p`
/// are full; the first `p` rows are truncated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizerMatrix {
    size: usize,
    alpha: Vec<f64>,
}

pub fn build_regularizer(coeffs: &AggregatedCoefficients, size: usize) -> Result<RegularizerMatrix> {
    RegularizerMatrix::new(coeffs.alpha_bar.clone(), size)
}

impl RegularizerMatrix {
    pub fn new(alpha: Vec<f64>, size: usize) -> Result<Self> {
        if alpha.len() >= size {
            return Err(Error::config(format!(
                "AR order {} must be below the temporal length {size}",
                alpha.len()
            )));
        }
        if !alpha.iter().all(|a| a.is_finite()) {
            return Err(Error::domain("AR coefficients must be finite"));
        }
        Ok(Self { size, alpha })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn order(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// `(column, value)` pairs of row `r`.
    pub fn row(&self, r: usize) -> Vec<(usize, f64)> {
        let p = self.order();
        let mut out = Vec::with_capacity(p + 1);
        if r >= p {
            out.push((r - p, 1.0));
        }
        for (j, a) in self.alpha.iter().enumerate() {
            if let Some(c) = (r + j + 1).checked_sub(p) {
                out.push((c, -a));
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.size, self.size);
        for r in 0..self.size {
            for (c, v) in self.row(r) {
                m[(r, c)] = v;
            }
        }
        m
    }

    /// `L · X` in `O(I · p · R)`.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.size, "operand rows");
        let p = self.order();
        let mut y = DMatrix::zeros(self.size, x.ncols());
        for col in 0..x.ncols() {
            let xc = x.column(col);
            let mut yc = y.column_mut(col);
            for r in 0..self.size {
                let mut v = 0.0;
                if r >= p {
                    v += xc[r - p];
                }
                for (j, a) in self.alpha.iter().enumerate() {
                    if r + j + 1 >= p {
                        v -= a * xc[r + j + 1 - p];
                    }
                }
                yc[r] = v;
            }
        }
        y
    }

    /// `Lᵀ · Y` in `O(I · p · R)`.
    pub fn apply_transpose(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(y.nrows(), self.size, "operand rows");
        let p = self.order();
        let n = self.size;
        let mut x = DMatrix::zeros(n, y.ncols());
        for col in 0..y.ncols() {
            let yc = y.column(col);
            let mut xc = x.column_mut(col);
            for c in 0..n {
                let mut v = 0.0;
                if c + p < n {
                    v += yc[c + p];
                }
                for (j, a) in self.alpha.iter().enumerate() {
                    let r = c + p - (j + 1);
                    if r < n {
                        v -= a * yc[r];
                    }
                }
                xc[c] = v;
            }
        }
        x
    }

    /// `‖L · X‖²_F`.
    pub fn penalty(&self, x: &DMatrix<f64>) -> f64 {
        self.apply(x).norm_squared()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn first_order_layout() {
        let l = RegularizerMatrix::new(vec![0.5], 3).unwrap().to_dense();
        let want = DMatrix::from_row_slice(3, 3, &[-0.5, 0.0, 0.0, 1.0, -0.5, 0.0, 0.0, 1.0, -0.5]);
        assert_eq!(l, want);
    }

    #[test]
    fn default_coefficients_band() {
        let l = build_regularizer(&AggregatedCoefficients::default(), 6).unwrap();
        let row: Vec<_> = l.row(4);
        assert_eq!(row, vec![(1, 1.0), (2, -0.55), (3, 0.19), (4, -0.04)]);
        for r in 3..6 {
            let s: f64 = l.row(r).iter().map(|e| e.1).sum();
            assert_abs_diff_eq!(s, 1.0 - (0.55 - 0.19 + 0.04), epsilon = 1e-15);
            assert_eq!(l.row(r).len(), 4);
        }
        assert_eq!(l.row(0), vec![(0, -0.04)]);
        assert!(RegularizerMatrix::new(vec![0.1; 3], 3).is_err());
    }

    #[test]
    fn zero_coefficients_are_a_shifted_ridge() {
        let l = RegularizerMatrix::new(vec![0.0, 0.0], 5).unwrap();
        let x = DMatrix::from_fn(5, 2, |i, j| (i * 2 + j) as f64 + 0.5);
        let want: f64 = (0..3).map(|i| x.row(i).norm_squared()).sum();
        assert_abs_diff_eq!(l.penalty(&x), want, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn banded_matches_dense(
            alpha in proptest::collection::vec(-1.5f64..1.5, 0..5),
            extra in 1usize..12,
            vals in proptest::collection::vec(-3.0f64..3.0, 64),
        ) {
            let n = alpha.len() + extra;
            let l = RegularizerMatrix::new(alpha, n).unwrap();
            let dense = l.to_dense();
            let x = DMatrix::from_fn(n, 3, |i, j| vals[(i * 3 + j) % vals.len()]);
            let lx = l.apply(&x);
            prop_assert!((&lx - &dense * &x).amax() <= 1e-12);
            prop_assert!((l.apply_transpose(&x) - dense.transpose() * &x).amax() <= 1e-12);
            prop_assert!((l.penalty(&x) - (&dense * &x).norm_squared()).abs() <= 1e-12 * (1.0 + lx.norm_squared()));
        }
    }
}
