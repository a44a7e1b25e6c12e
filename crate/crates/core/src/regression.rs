//! Exact GP regression with Gaussian noise.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::kernels::{cross_covariance, GramCache, HyperParams, KernelSpec};
use crate::linalg::Factorization;

/// Round-off tolerance, relative to the prior variance when that exceeds 1,
/// below which a negative predictive variance is clamped to zero.
pub const VARIANCE_CLAMP: f64 = 1e-10;

/// Gaussian predictive distribution of a latent value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveGaussian {
    pub mean: f64,
    pub variance: f64,
}

/// Posterior of a GP regression model for fixed hyperparameters.
#[derive(Clone, Debug)]
pub struct RegressionPosterior {
    pub spec: KernelSpec,
    pub hp: HyperParams,
    pub train_x: Vec<Vec<f64>>,
    pub train_y: Vec<f64>,
    /// Factor of `K + σ_n²I` (plus jitter, if any was needed).
    pub factor: Factorization,
    /// `(K + σ_n²I)⁻¹ (y - m·1)`.
    pub alpha: DVector<f64>,
}

fn check_targets(y: &[f64], n: usize) -> Result<()> {
    if y.len() != n {
        return Err(GpError::DimensionMismatch {
            expected: n,
            got: y.len(),
        });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(GpError::NonFinite("targets"));
    }
    Ok(())
}

fn noisy_gram(cache: &GramCache, hp: &HyperParams) -> Result<DMatrix<f64>> {
    let log_sigma_n = hp
        .log_sigma_n
        .ok_or_else(|| GpError::InvalidArgument("regression needs a noise hyperparameter".into()))?;
    let mut k = cache.gram(hp)?;
    let noise = (2.0 * log_sigma_n).exp();
    for i in 0..k.nrows() {
        k[(i, i)] += noise;
    }
    Ok(k)
}

fn residual(y: &[f64], mean: f64) -> DVector<f64> {
    DVector::from_iterator(y.len(), y.iter().map(|v| v - mean))
}

/// Conditions the GP on `(x, y)`.
pub fn fit_exact(x: &[Vec<f64>], y: &[f64], spec: &KernelSpec, hp: &HyperParams) -> Result<RegressionPosterior> {
    hp.validate(spec)?;
    let cache = GramCache::new(x, spec)?;
    fit_with_cache(&cache, x, y, spec, hp)
}

pub(crate) fn fit_with_cache(
    cache: &GramCache,
    x: &[Vec<f64>],
    y: &[f64],
    spec: &KernelSpec,
    hp: &HyperParams,
) -> Result<RegressionPosterior> {
    check_targets(y, cache.n())?;
    let factor = Factorization::new(noisy_gram(cache, hp)?)?;
    let alpha = factor.solve(&residual(y, hp.mean_const));
    Ok(RegressionPosterior {
        spec: spec.clone(),
        hp: hp.clone(),
        train_x: x.to_vec(),
        train_y: y.to_vec(),
        factor,
        alpha,
    })
}

/// Log marginal likelihood
///
/// ```text
/// -½ (y-m)ᵀ(K+σ_n²I)⁻¹(y-m) - ½ log|K+σ_n²I| - (N/2) log 2π
/// ```
///
/// and its gradient over every flattened hyperparameter.
pub fn log_marginal_likelihood(
    x: &[Vec<f64>],
    y: &[f64],
    spec: &KernelSpec,
    hp: &HyperParams,
) -> Result<(f64, Vec<f64>)> {
    hp.validate(spec)?;
    let cache = GramCache::new(x, spec)?;
    lml_with_cache(&cache, y, hp)
}

pub(crate) fn lml_with_cache(cache: &GramCache, y: &[f64], hp: &HyperParams) -> Result<(f64, Vec<f64>)> {
    check_targets(y, cache.n())?;
    let n = cache.n();
    let factor = Factorization::new(noisy_gram(cache, hp)?)?;
    let r = residual(y, hp.mean_const);
    let alpha = factor.solve(&r);
    let value = -0.5 * r.dot(&alpha) - factor.half_log_det() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    // ∂/∂θ = ½ tr((ααᵀ - Ky⁻¹) ∂Ky/∂θ)
    let ky_inv = factor.inverse();
    let f = &alpha * alpha.transpose() - &ky_inv;
    let mut grad = cache.contract_gradient(hp, &f)?;
    let noise = hp.noise_variance();
    let len = grad.len();
    grad[len - 2] = noise * f.trace();
    grad[len - 1] = alpha.sum();
    Ok((value, grad))
}

/// Predictive mean `m + k_*ᵀα` and variance `k(x_*,x_*) - k_*ᵀ(K+σ_n²I)⁻¹k_*`.
pub fn predict_regression(post: &RegressionPosterior, x_star: &[f64]) -> Result<PredictiveGaussian> {
    let (ks, kss) = cross_covariance(&post.train_x, x_star, &post.spec, &post.hp)?;
    let ks = DVector::from_vec(ks);
    let mean = post.hp.mean_const + ks.dot(&post.alpha);
    let v = post.factor.solve_lower(&ks);
    let variance = clamp_variance(kss - v.dot(&v), kss)?;
    Ok(PredictiveGaussian { mean, variance })
}

/// Negative variances within `VARIANCE_CLAMP·max(1, prior)` are round-off.
pub(crate) fn clamp_variance(v: f64, prior: f64) -> Result<f64> {
    if v >= 0.0 {
        Ok(v)
    } else if v > -VARIANCE_CLAMP * prior.max(1.0) {
        log::warn!("clamping round-off predictive variance {v:e} to zero");
        Ok(0.0)
    } else if v.is_nan() {
        Err(GpError::NonFinite("predictive variance"))
    } else {
        Err(GpError::NegativeVariance(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{gram, KernelKind};
    use crate::subspaces::SubspaceLayout;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_point_model() -> (Vec<Vec<f64>>, KernelSpec, HyperParams) {
        let spec = KernelSpec::single(KernelKind::Se, 2).unwrap();
        let hp = HyperParams {
            log_sigma_f: vec![0.0],
            log_ell: vec![0.0],
            log_sigma_n: Some(0.5 * 0.1f64.ln()),
            mean_const: 0.0,
        };
        (vec![vec![0.4, -0.2]], spec, hp)
    }

    #[test]
    fn scalar_solve() {
        let (x, spec, hp) = unit_point_model();
        let post = fit_exact(&x, &[1.0], &spec, &hp).unwrap();
        assert!((post.alpha[0] - 1.0 / 1.1).abs() < 1e-12);
        let (lml, _) = log_marginal_likelihood(&x, &[1.0], &spec, &hp).unwrap();
        let expected = -0.5 / 1.1 - 0.5 * 1.1f64.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((lml - expected).abs() < 1e-12);
        assert!((lml + 1.421139).abs() < 1e-6);
        let p = predict_regression(&post, &x[0]).unwrap();
        assert!((p.mean - 1.0 / 1.1).abs() < 1e-12);
        assert!((p.variance - (1.0 - 1.0 / 1.1)).abs() < 1e-12);
    }

    #[test]
    fn zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<Vec<f64>> = (0..5).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
        let spec = KernelSpec::single(KernelKind::Se, 1).unwrap();
        let mut hp = HyperParams::unit(&spec, Some(-1.0));
        hp.mean_const = 2.5;
        let y = vec![2.5; 5];
        let post = fit_exact(&x, &y, &spec, &hp).unwrap();
        assert!(post.alpha.iter().all(|&a| a == 0.0));
        let (lml, _) = log_marginal_likelihood(&x, &y, &spec, &hp).unwrap();
        let mut k = gram(&x, &spec, &hp).unwrap().into_inner();
        for i in 0..5 {
            k[(i, i)] += hp.noise_variance();
        }
        let expected = -0.5 * k.determinant().ln() - 2.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((lml - expected).abs() < 1e-10);
    }

    #[test]
    fn far_point_recovers_prior() {
        let (x, spec, mut hp) = unit_point_model();
        hp.log_ell[0] = -3.0;
        hp.mean_const = 0.7;
        let post = fit_exact(&x, &[5.0], &spec, &hp).unwrap();
        let p = predict_regression(&post, &[40.0, 40.0]).unwrap();
        assert!((p.mean - 0.7).abs() < 1e-12);
        assert!((p.variance - 1.0).abs() < 1e-12);
        assert!(predict_regression(&post, &[1.0]).is_err());
    }

    #[test]
    fn factorization_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x: Vec<Vec<f64>> = (0..20).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
        let layout = SubspaceLayout::from_bags(4, vec![vec![0, 1], vec![2, 3]]).unwrap();
        let spec = KernelSpec::new(KernelKind::Lin, layout).unwrap();
        let hp = HyperParams {
            log_sigma_f: vec![0.2, -0.3],
            log_ell: vec![],
            log_sigma_n: Some(-1.2),
            mean_const: 0.3,
        };
        let post = fit_exact(&x, &y, &spec, &hp).unwrap();
        let mut ky = gram(&x, &spec, &hp).unwrap().into_inner();
        for i in 0..20 {
            ky[(i, i)] += hp.noise_variance();
        }
        let l = post.factor.l();
        assert!((&l * l.transpose() - &ky).norm() / ky.norm() < 1e-8);
        let r = DVector::from_iterator(20, y.iter().map(|v| v - 0.3));
        assert!((&ky * &post.alpha - r).amax() < 1e-8);
    }

    #[test]
    fn variance_clamp() {
        assert_eq!(clamp_variance(-1e-12, 1.0).unwrap(), 0.0);
        assert!(clamp_variance(-1e-6, 1.0).is_err());
        assert_eq!(clamp_variance(0.3, 1.0).unwrap(), 0.3);
        assert_eq!(clamp_variance(-1e-6, 1e8).unwrap(), 0.0);
        assert!(clamp_variance(-1e-6, 0.01).is_err());
    }

    #[test]
    fn missing_noise_is_an_error() {
        let (x, spec, mut hp) = unit_point_model();
        hp.log_sigma_n = None;
        assert!(fit_exact(&x, &[1.0], &spec, &hp).is_err());
    }
}
