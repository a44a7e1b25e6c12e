//! Expectation propagation with sequential, damped site updates.

use nalgebra::{DMatrix, DVector};

use super::likelihood::{log_sigmoid, sigmoid, tilted_moments};
use super::{check_labels, InferenceMethod, LatentPosterior, SiteParams};
use crate::error::{GpError, Result};
use crate::kernels::{GramCache, HyperParams, KernelSpec};
use crate::linalg::Factorization;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpOptions {
    /// Convergence threshold on the largest site change within a sweep.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Weight of the freshly computed site in each update (1 = undamped).
    pub damping: f64,
}

impl Default for EpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_sweeps: 100,
            damping: 0.9,
        }
    }
}

/// EP approximation of the latent posterior at fixed hyperparameters.
///
/// Fails with [`GpError::ConvergenceFailure`] on non-finite quantities, a
/// non-positive cavity variance, or when the sites are still moving after
/// the sweep budget.
pub fn ep_fit(x: &[Vec<f64>], y: &[f64], spec: &KernelSpec, hp: &HyperParams) -> Result<LatentPosterior> {
    ep_fit_with(x, y, spec, hp, &EpOptions::default())
}

pub fn ep_fit_with(
    x: &[Vec<f64>],
    y: &[f64],
    spec: &KernelSpec,
    hp: &HyperParams,
    opts: &EpOptions,
) -> Result<LatentPosterior> {
    hp.validate(spec)?;
    let cache = GramCache::new(x, spec)?;
    ep_with_cache(&cache, x, y, spec, hp, opts, None)
}

fn failure(msg: impl Into<String>) -> GpError {
    GpError::ConvergenceFailure(msg.into())
}

/// Posterior implied by sites `(τ̃, ν̃)`:
/// `Σ = K - K S B⁻¹ S K`, `μ = K α + m` with `α = ν̃ - S B⁻¹ S (K ν̃ + m)`.
struct SiteMoments {
    factor: Factorization,
    sw: DVector<f64>,
    sigma: DMatrix<f64>,
    alpha: DVector<f64>,
    mu: DVector<f64>,
}

fn site_moments(k: &DMatrix<f64>, tau: &[f64], nu: &[f64], m: f64) -> Result<SiteMoments> {
    let n = k.nrows();
    let sw = DVector::from_iterator(n, tau.iter().map(|t| t.sqrt()));
    let b = DMatrix::from_fn(n, n, |i, j| sw[i] * k[(i, j)] * sw[j]) + DMatrix::identity(n, n);
    let factor = Factorization::new(b).map_err(|e| failure(format!("site precision matrix: {e}")))?;
    let v = factor.solve_lower_mat(&DMatrix::from_fn(n, n, |i, j| sw[i] * k[(i, j)]));
    let sigma = k - v.transpose() * &v;
    let nu = DVector::from_column_slice(nu);
    let rhs = (k * &nu).add_scalar(m).component_mul(&sw);
    let alpha = &nu - sw.component_mul(&factor.solve(&rhs));
    let mu = (k * &alpha).add_scalar(m);
    Ok(SiteMoments {
        factor,
        sw,
        sigma,
        alpha,
        mu,
    })
}

pub(crate) fn ep_with_cache(
    cache: &GramCache,
    x: &[Vec<f64>],
    y: &[f64],
    spec: &KernelSpec,
    hp: &HyperParams,
    opts: &EpOptions,
    warm_start: Option<(&[f64], &[f64])>,
) -> Result<LatentPosterior> {
    let n = cache.n();
    check_labels(y, n)?;
    let k = cache.gram(hp)?;
    let m = hp.mean_const;

    let (mut tau, mut nu) = match warm_start {
        Some((t, v)) if t.len() == n && v.len() == n => (t.to_vec(), v.to_vec()),
        _ => (vec![0.0; n], vec![0.0; n]),
    };
    clear_pinned_sites(&k, &mut tau, &mut nu);
    let (mut sigma, mut mu) = if tau.iter().all(|&t| t == 0.0) && nu.iter().all(|&v| v == 0.0) {
        (k.clone(), DVector::from_element(n, m))
    } else {
        let sm = site_moments(&k, &tau, &nu, m)?;
        (sm.sigma, sm.mu)
    };

    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let mut d_tau_all = vec![0.0; n];
        let mut d_nu_all = vec![0.0; n];
        for i in 0..n {
            if is_pinned(&k, i) {
                continue;
            }
            let sii = sigma[(i, i)];
            let tau_c = 1.0 / sii - tau[i];
            let nu_c = mu[i] / sii - nu[i];
            if !(tau_c > 0.0) || !tau_c.is_finite() || !nu_c.is_finite() {
                return Err(failure(format!(
                    "cavity precision {tau_c:e} at site {i} in sweep {sweeps}"
                )));
            }
            let t = tilted_moments(y[i], nu_c / tau_c, 1.0 / tau_c);
            if !(t.variance > 0.0) || !t.mean.is_finite() {
                return Err(failure(format!("degenerate tilted moments at site {i}")));
            }
            let (tau_hat, nu_hat) = t.site_params(tau_c, nu_c);
            let tau_hat = tau_hat.max(0.0);
            let tau_new = opts.damping * tau_hat + (1.0 - opts.damping) * tau[i];
            let nu_new = opts.damping * nu_hat + (1.0 - opts.damping) * nu[i];
            let d_tau = tau_new - tau[i];
            let d_nu = nu_new - nu[i];
            d_tau_all[i] = d_tau;
            d_nu_all[i] = d_nu;
            tau[i] = tau_new;
            nu[i] = nu_new;

            // rank-one update of Σ and μ
            let si = sigma.column(i).clone_owned();
            let c = d_tau / (1.0 + d_tau * sii);
            let mu_i = mu[i];
            sigma.ger(-c, &si, &si, 1.0);
            mu.axpy(d_nu * (1.0 - c * sii) - c * mu_i, &si, 1.0);
        }
        // refresh from scratch to shed accumulated round-off
        let sm = site_moments(&k, &tau, &nu, m)?;
        sigma = sm.sigma;
        mu = sm.mu;
        // site changes measured in units of the posterior marginal, so the
        // test does not depend on the overall kernel amplitude
        let max_change = (0..n).fold(0.0f64, |acc, i| {
            let v = sigma[(i, i)].max(0.0);
            acc.max(d_tau_all[i].abs() * v).max(d_nu_all[i].abs() * v.sqrt())
        });
        if !max_change.is_finite() || mu.iter().any(|v| !v.is_finite()) {
            return Err(failure(format!("non-finite posterior in sweep {sweeps}")));
        }
        if max_change < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(failure(format!("sites still changing after {sweeps} sweeps")));
    }
    let mut post = ep_posterior_from_sites(cache, x, y, spec, hp, &k, &tau, &nu)?;
    post.iterations = sweeps;
    Ok(post)
}

/// A latent with zero prior variance equals the mean exactly. Its likelihood
/// factor is then a constant, so its site stays flat.
fn is_pinned(k: &DMatrix<f64>, i: usize) -> bool {
    k[(i, i)] <= 0.0
}

fn clear_pinned_sites(k: &DMatrix<f64>, tau: &mut [f64], nu: &mut [f64]) {
    for i in 0..k.nrows() {
        if is_pinned(k, i) {
            tau[i] = 0.0;
            nu[i] = 0.0;
        }
    }
}

/// EP posterior, log marginal likelihood and gradient for given sites.
///
/// The gradient holds the sites fixed, which is exact at an EP fixed point:
/// `∂/∂θ = ½ tr((ααᵀ - S B⁻¹ S) ∂K/∂θ)` and `∂/∂m = Σ α`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn ep_posterior_from_sites(
    cache: &GramCache,
    x: &[Vec<f64>],
    y: &[f64],
    spec: &KernelSpec,
    hp: &HyperParams,
    k: &DMatrix<f64>,
    tau: &[f64],
    nu: &[f64],
) -> Result<LatentPosterior> {
    let n = cache.n();
    let m = hp.mean_const;
    let (mut tau, mut nu) = (tau.to_vec(), nu.to_vec());
    clear_pinned_sites(k, &mut tau, &mut nu);
    let sm = site_moments(k, &tau, &nu, m)?;

    let mut sum_log_z = 0.0;
    let mut pinned_mean_grad = 0.0;
    let mut log_z_tilde = Vec::with_capacity(n);
    let mut quad = 0.0;
    let mut log_ratio = 0.0;
    let p = DVector::from_fn(n, |i, _| nu[i] - m * tau[i]);
    for i in 0..n {
        if is_pinned(k, i) {
            // the factor λ(y m) multiplies the evidence as a constant
            sum_log_z += log_sigmoid(y[i] * m);
            pinned_mean_grad += y[i] * sigmoid(-y[i] * m);
            log_z_tilde.push(f64::INFINITY);
            continue;
        }
        let v = sm.sigma[(i, i)];
        let tau_c = 1.0 / v - tau[i];
        let nu_c = sm.mu[i] / v - nu[i];
        if !(tau_c > 0.0) || !tau_c.is_finite() {
            return Err(failure(format!("cavity precision {tau_c:e} at site {i}")));
        }
        let t = tilted_moments(y[i], nu_c / tau_c, 1.0 / tau_c);
        sum_log_z += t.log_z;
        let q = nu_c - m * tau_c;
        quad += 0.5 * v * p[i] * p[i] - 0.5 * q * (tau[i] / tau_c * q - 2.0 * p[i]) * v;
        log_ratio += (tau[i] / tau_c).ln_1p();
        log_z_tilde.push(if tau[i] > 0.0 {
            let (mu_c, var_c) = (nu_c / tau_c, 1.0 / tau_c);
            let (mu_t, var_t) = (nu[i] / tau[i], 1.0 / tau[i]);
            let s = var_c + var_t;
            t.log_z + 0.5 * (2.0 * std::f64::consts::PI).ln() + 0.5 * s.ln() + (mu_c - mu_t).powi(2) / (2.0 * s)
        } else {
            f64::INFINITY
        });
    }
    let neg_lml = sm.factor.half_log_det() - sum_log_z - 0.5 * p.dot(&(&sm.sigma * &p)) + quad - 0.5 * log_ratio;
    let approx_lml = -neg_lml;
    if !approx_lml.is_finite() {
        return Err(failure("non-finite EP log marginal likelihood"));
    }

    let b_inv = sm.factor.inverse();
    let f = &sm.alpha * sm.alpha.transpose() - DMatrix::from_fn(n, n, |i, j| sm.sw[i] * b_inv[(i, j)] * sm.sw[j]);
    let mut lml_gradient = cache.contract_gradient(hp, &f)?;
    let last = lml_gradient.len() - 1;
    lml_gradient[last] = sm.alpha.sum() + pinned_mean_grad;

    Ok(LatentPosterior {
        method: InferenceMethod::Ep,
        spec: spec.clone(),
        hp: hp.clone(),
        train_x: x.to_vec(),
        labels: y.to_vec(),
        f_hat: sm.mu,
        alpha: sm.alpha,
        sqrt_w: sm.sw,
        factor: sm.factor,
        sites: Some(SiteParams {
            tau,
            nu,
            log_z_tilde,
        }),
        approx_lml,
        lml_gradient,
        iterations: 0,
    })
}
