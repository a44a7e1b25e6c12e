//! Cholesky factorization with diagonal jitter escalation.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{GpError, Result};

const FIRST_JITTER: f64 = 1e-10;
const LAST_JITTER: f64 = 1e-4;

/// Cholesky factor of a symmetric matrix plus the diagonal jitter that was
/// needed to obtain it.
#[derive(Clone, Debug)]
pub struct Factorization {
    pub chol: Cholesky<f64, Dyn>,
    /// Absolute value added to the diagonal (0 when none was needed).
    pub jitter: f64,
}

impl Factorization {
    /// Factorizes `m`. On failure adds `1e-10·trace/N` to the diagonal and
    /// escalates by ×10 up to `1e-4·trace/N` before giving up.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        if n == 0 {
            return Err(GpError::Empty("matrix"));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GpError::NonFinite("matrix to factorize"));
        }
        if let Some(chol) = Cholesky::new(m.clone()) {
            return Ok(Self { chol, jitter: 0.0 });
        }
        let mut scale = m.trace() / n as f64;
        if !(scale > 0.0) {
            scale = 1.0;
        }
        let mut rel = FIRST_JITTER;
        loop {
            let jitter = rel * scale;
            let mut shifted = m.clone();
            for i in 0..n {
                shifted[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(shifted) {
                log::debug!("cholesky needed jitter {jitter:e}");
                return Ok(Self { chol, jitter });
            }
            if rel >= LAST_JITTER * (1.0 - 1e-9) {
                return Err(GpError::NotPositiveDefinite { jitter });
            }
            rel *= 10.0;
        }
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// `log |A| = 2 Σ log Lᵢᵢ`.
    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    /// Sum of `log Lᵢᵢ`.
    pub fn half_log_det(&self) -> f64 {
        0.5 * self.log_det()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// `L⁻¹ b`.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal")
    }

    pub fn solve_lower_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal")
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}
