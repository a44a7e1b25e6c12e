//! Binary GP classification with a logistic likelihood.
//!
//! The latent posterior `p(f | X, y)` is approximated by a Gaussian, either
//! around its mode ([`laplace_fit`]) or by expectation propagation
//! ([`ep_fit`]). Both approximations are stored in the same form,
//!
//! ```text
//! B = I + S K S,    E[f_*] = m + k_*ᵀ α,    V[f_*] = k(x_*,x_*) - ‖L⁻¹ S k_*‖²
//! ```
//!
//! with `S = diag(√w)` (Laplace curvature or EP site precisions) and `L` the
//! Cholesky factor of `B`, so prediction does not care which method fit it.

mod ep;
mod laplace;
pub mod likelihood;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

pub use ep::{ep_fit, ep_fit_with, EpOptions};
pub use laplace::{laplace_fit, laplace_fit_with, LaplaceOptions};
pub(crate) use ep::{ep_posterior_from_sites, ep_with_cache};
pub(crate) use laplace::{laplace_posterior_at, laplace_with_cache};

use crate::error::{GpError, Result};
use crate::kernels::{cross_covariance, GramCache, HyperParams, KernelSpec};
use crate::linalg::Factorization;
use crate::regression::clamp_variance;
use likelihood::averaged_probability;

/// Approximate inference scheme for the latent posterior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InferenceMethod {
    Laplace,
    Ep,
}

/// EP site approximations `Z̃ᵢ N(fᵢ | μ̃ᵢ, σ̃ᵢ²)`.
///
/// `tau` and `nu` are the natural parameters `1/σ̃²` and `μ̃/σ̃²` that EP
/// actually updates; a site with `tau == 0` is uninformative and reports
/// `σ̃² = +∞`.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteParams {
    pub tau: Vec<f64>,
    pub nu: Vec<f64>,
    pub log_z_tilde: Vec<f64>,
}

impl SiteParams {
    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    pub fn mu_tilde(&self) -> Vec<f64> {
        self.tau
            .iter()
            .zip(&self.nu)
            .map(|(&t, &n)| if t > 0.0 { n / t } else { 0.0 })
            .collect()
    }

    pub fn sigma2_tilde(&self) -> Vec<f64> {
        self.tau
            .iter()
            .map(|&t| if t > 0.0 { 1.0 / t } else { f64::INFINITY })
            .collect()
    }
}

/// Gaussian approximation of the latent posterior of a binary GP classifier.
#[derive(Clone, Debug)]
pub struct LatentPosterior {
    pub method: InferenceMethod,
    pub spec: KernelSpec,
    pub hp: HyperParams,
    pub train_x: Vec<Vec<f64>>,
    /// Training labels in `{-1, +1}`.
    pub labels: Vec<f64>,
    /// Latent mean: the mode for Laplace, the posterior mean for EP.
    pub f_hat: DVector<f64>,
    /// Prediction weights: `E[f_*] = m + k_*ᵀ α`.
    pub alpha: DVector<f64>,
    pub sqrt_w: DVector<f64>,
    /// Factor of `B = I + S K S`.
    pub factor: Factorization,
    pub sites: Option<SiteParams>,
    /// Approximate log marginal likelihood `log q(y | X)`.
    pub approx_lml: f64,
    /// Its gradient over the flattened hyperparameters.
    pub lml_gradient: Vec<f64>,
    /// Newton iterations or EP sweeps used.
    pub iterations: usize,
}

/// Class prediction at a test input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveClass {
    pub latent_mean: f64,
    pub latent_var: f64,
    /// Averaged predictive probability `p(y_* = +1 | x_*)`.
    pub probability: f64,
}

impl PredictiveClass {
    pub fn label(&self) -> f64 {
        if self.probability >= 0.5 {
            1.0
        } else {
            -1.0
        }
    }
}

impl LatentPosterior {
    /// Latent predictive mean and variance at `x_star`.
    pub fn latent(&self, x_star: &[f64]) -> Result<(f64, f64)> {
        let (ks, kss) = cross_covariance(&self.train_x, x_star, &self.spec, &self.hp)?;
        let ks = DVector::from_vec(ks);
        let mean = self.hp.mean_const + ks.dot(&self.alpha);
        let v = self.factor.solve_lower(&ks.component_mul(&self.sqrt_w));
        Ok((mean, clamp_variance(kss - v.dot(&v), kss)?))
    }
}

impl LatentPosterior {
    /// Rebuilds an EP posterior from its site natural parameters. Gives the
    /// same posterior, bit for bit, as the fit that produced the sites.
    pub fn from_ep_sites(
        x: &[Vec<f64>],
        y: &[f64],
        spec: &KernelSpec,
        hp: &HyperParams,
        tau: &[f64],
        nu: &[f64],
    ) -> Result<Self> {
        hp.validate(spec)?;
        let cache = GramCache::new(x, spec)?;
        check_labels(y, cache.n())?;
        for v in [tau, nu] {
            if v.len() != cache.n() {
                return Err(GpError::DimensionMismatch {
                    expected: cache.n(),
                    got: v.len(),
                });
            }
        }
        let k = cache.gram(hp)?;
        ep_posterior_from_sites(&cache, x, y, spec, hp, &k, tau, nu)
    }

    /// Rebuilds a Laplace posterior from its mode in the `a = K⁻¹(f̂ - m)`
    /// parameterization (the `alpha` of the original fit).
    pub fn from_laplace_mode(x: &[Vec<f64>], y: &[f64], spec: &KernelSpec, hp: &HyperParams, a: &[f64]) -> Result<Self> {
        hp.validate(spec)?;
        let cache = GramCache::new(x, spec)?;
        check_labels(y, cache.n())?;
        if a.len() != cache.n() {
            return Err(GpError::DimensionMismatch {
                expected: cache.n(),
                got: a.len(),
            });
        }
        let k = cache.gram(hp)?;
        laplace_posterior_at(&cache, x, y, spec, hp, &k, DVector::from_column_slice(a))
    }
}

/// Averaged predictive probability at `x_star`.
pub fn predict_proba(post: &LatentPosterior, x_star: &[f64]) -> Result<PredictiveClass> {
    let (latent_mean, latent_var) = post.latent(x_star)?;
    Ok(PredictiveClass {
        latent_mean,
        latent_var,
        probability: averaged_probability(latent_mean, latent_var),
    })
}

pub(crate) fn check_labels(y: &[f64], n: usize) -> Result<()> {
    if y.len() != n {
        return Err(GpError::DimensionMismatch {
            expected: n,
            got: y.len(),
        });
    }
    if let Some(bad) = y.iter().find(|&&v| v != 1.0 && v != -1.0) {
        return Err(GpError::InvalidArgument(format!("labels must be -1 or +1, got {bad}")));
    }
    Ok(())
}
