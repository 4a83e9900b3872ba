//! Ridge regression with an unpenalized intercept over 0/1 bit features.
//!
//! The sufficient statistics (`XᵀX`, `Xᵀy`, column sums) are accumulated
//! from set bits only and can be downdated row by row, which is what lets the
//! δ-ball experiment refit thousands of models cheaply.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::Fingerprint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl RidgeModel {
    pub fn predict(&self, x: &Fingerprint) -> f64 {
        self.intercept + x.ones().map(|j| self.weights[j]).sum::<f64>()
    }
}

#[derive(Clone, Debug)]
pub struct RidgeGram {
    p: usize,
    n: f64,
    sum_x: Vec<f64>,
    /// Row-major `p × p`.
    xtx: Vec<f64>,
    xty: Vec<f64>,
    sum_y: f64,
}

impl RidgeGram {
    pub fn new(p: usize) -> Self {
        Self {
            p,
            n: 0.0,
            sum_x: vec![0.0; p],
            xtx: vec![0.0; p * p],
            xty: vec![0.0; p],
            sum_y: 0.0,
        }
    }

    pub fn from_rows<'a>(p: usize, rows: impl IntoIterator<Item = (&'a Fingerprint, f64)>) -> Self {
        let mut g = Self::new(p);
        for (x, y) in rows {
            g.update(x, y, 1.0);
        }
        g
    }

    pub fn rows(&self) -> usize {
        self.n as usize
    }

    pub fn add(&mut self, x: &Fingerprint, y: f64) {
        self.update(x, y, 1.0);
    }

    pub fn remove(&mut self, x: &Fingerprint, y: f64) {
        self.update(x, y, -1.0);
    }

    fn update(&mut self, x: &Fingerprint, y: f64, sign: f64) {
        debug_assert_eq!(x.len(), self.p);
        let ones: Vec<usize> = x.ones().collect();
        self.n += sign;
        self.sum_y += sign * y;
        for &a in &ones {
            self.sum_x[a] += sign;
            self.xty[a] += sign * y;
            let row = &mut self.xtx[a * self.p..(a + 1) * self.p];
            for &b in &ones {
                row[b] += sign;
            }
        }
    }

    /// Solve `(XcᵀXc + λI) w = Xcᵀyc` on centered data; `b = ȳ - x̄ᵀw`.
    /// Falls back to a minimum-norm SVD solve when the system is singular.
    pub fn solve(&self, lambda: f64) -> Result<RidgeModel> {
        if self.n < 1.0 {
            return Err(Error::domain("ridge fit on an empty training set"));
        }
        let p = self.p;
        let n = self.n;
        let y_mean = self.sum_y / n;
        let a = DMatrix::from_fn(p, p, |i, j| {
            let centered = self.xtx[i * p + j] - self.sum_x[i] * self.sum_x[j] / n;
            if i == j {
                centered + lambda
            } else {
                centered
            }
        });
        let rhs = DVector::from_fn(p, |i, _| self.xty[i] - self.sum_x[i] * y_mean);
        let w = match a.clone().cholesky() {
            Some(chol) if lambda > 0.0 => chol.solve(&rhs),
            _ => {
                let svd = a.svd(true, true);
                let tol = 1e-12 * svd.singular_values.max().max(1.0);
                svd.solve(&rhs, tol).map_err(|e| Error::Degenerate(format!("ridge solve: {e}")))?
            }
        };
        let intercept = y_mean - (0..p).map(|i| self.sum_x[i] / n * w[i]).sum::<f64>();
        Ok(RidgeModel {
            weights: w.iter().copied().collect(),
            intercept,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downdate_matches_fresh_accumulation() {
        let rows: Vec<(Fingerprint, f64)> = (0..12)
            .map(|i| {
                let fp = Fingerprint::from_indices(16, [i % 16, (i * 5 + 1) % 16, (i * 3 + 2) % 16]).unwrap();
                (fp, i as f64 * 0.3 - 1.0)
            })
            .collect();
        let mut full = RidgeGram::from_rows(16, rows.iter().map(|(x, y)| (x, *y)));
        full.remove(&rows[3].0, rows[3].1);
        full.remove(&rows[7].0, rows[7].1);
        let fresh = RidgeGram::from_rows(
            16,
            rows.iter().enumerate().filter(|(i, _)| *i != 3 && *i != 7).map(|(_, (x, y))| (x, *y)),
        );
        let a = full.solve(1.0).unwrap();
        let b = fresh.solve(1.0).unwrap();
        for (u, v) in a.weights.iter().zip(&b.weights) {
            assert!((u - v).abs() < 1e-12);
        }
        assert!((a.intercept - b.intercept).abs() < 1e-12);
    }
}
