//! Natural cubic spline interpolation.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Interpolating cubic spline with zero second derivative at both ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalSpline {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Second derivatives at the knots.
    pub second: Vec<f64>,
}

impl NaturalSpline {
    /// Fits through `(x, y)`; `x` must be strictly increasing.
    pub fn fit(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let n = x.len();
        if n != y.len() || n < 2 {
            return Err(Error::Shape(format!(
                "spline needs matching knot vectors of length >= 2, got {} and {}",
                n,
                y.len()
            )));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter(
                "spline knots must be strictly increasing".into(),
            ));
        }
        let mut second = vec![0.0; n];
        if n > 2 {
            // Tridiagonal system for interior second derivatives (Thomas algorithm).
            let m = n - 2;
            let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
            let mut diag = vec![0.0; m];
            let mut rhs = vec![0.0; m];
            for i in 0..m {
                diag[i] = 2.0 * (h[i] + h[i + 1]);
                rhs[i] = 6.0 * ((y[i + 2] - y[i + 1]) / h[i + 1] - (y[i + 1] - y[i]) / h[i]);
            }
            for i in 1..m {
                let w = h[i] / diag[i - 1];
                diag[i] -= w * h[i];
                rhs[i] -= w * rhs[i - 1];
            }
            second[m] = rhs[m - 1] / diag[m - 1];
            for i in (0..m - 1).rev() {
                second[i + 1] = (rhs[i] - h[i + 1] * second[i + 2]) / diag[i];
            }
        }
        Ok(NaturalSpline { x, y, second })
    }

    /// Evaluates the spline, extrapolating the end pieces outside the knots.
    pub fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        let k = self.x.partition_point(|&xi| xi <= t).clamp(1, n - 1) - 1;
        let h = self.x[k + 1] - self.x[k];
        let a = (self.x[k + 1] - t) / h;
        let b = (t - self.x[k]) / h;
        a * self.y[k]
            + b * self.y[k + 1]
            + ((a * a * a - a) * self.second[k] + (b * b * b - b) * self.second[k + 1]) * h * h
                / 6.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproduces_knots_and_lines() {
        let x = vec![0.0, 0.3, 1.0, 1.7, 3.0];
        let y: Vec<f64> = x.iter().map(|t| 2.0 * t - 1.0).collect();
        let s = NaturalSpline::fit(x.clone(), y.clone()).unwrap();
        for t in [0.1, 0.5, 2.2, 2.9] {
            assert!((s.eval(t) - (2.0 * t - 1.0)).abs() < 1e-12);
        }
        assert!(s.second.iter().all(|a| a.abs() < 1e-12));
    }

    #[test]
    fn continuity_of_first_derivative() {
        let x: Vec<f64> = (0..8).map(|i| (i as f64).powf(1.3)).collect();
        let y: Vec<f64> = x.iter().map(|t| t.sin()).collect();
        let s = NaturalSpline::fit(x.clone(), y.clone()).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert!((s.eval(*xi) - yi).abs() < 1e-12);
        }
        let eps = 1e-6;
        for &xi in &x[1..7] {
            let left = (s.eval(xi) - s.eval(xi - eps)) / eps;
            let right = (s.eval(xi + eps) - s.eval(xi)) / eps;
            assert!((left - right).abs() < 1e-4);
        }
        assert_eq!(s.second[0], 0.0);
        assert_eq!(s.second[7], 0.0);
    }

    #[test]
    fn rejects_unsorted_knots() {
        assert!(NaturalSpline::fit(vec![0.0, 0.0, 1.0], vec![0.0; 3]).is_err());
    }
}
