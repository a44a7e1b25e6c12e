//! Laplace approximation: Newton search for the posterior mode and the
//! Gaussian centered there with the Hessian's inverse as covariance.

use nalgebra::{DMatrix, DVector};

use super::likelihood::{log_lik_derivatives, log_sigmoid};
use super::{check_labels, InferenceMethod, LatentPosterior};
use crate::error::{GpError, Result};
use crate::kernels::{GramCache, HyperParams, KernelSpec};
use crate::linalg::Factorization;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LaplaceOptions {
    /// Stationarity tolerance on `‖∇log p(y|f) - K⁻¹(f - m)‖∞`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LaplaceOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 50,
        }
    }
}

/// Laplace approximation of the latent posterior at fixed hyperparameters.
pub fn laplace_fit(x: &[Vec<f64>], y: &[f64], spec: &KernelSpec, hp: &HyperParams) -> Result<LatentPosterior> {
    laplace_fit_with(x, y, spec, hp, &LaplaceOptions::default())
}

pub fn laplace_fit_with(
    x: &[Vec<f64>],
    y: &[f64],
    spec: &KernelSpec,
    hp: &HyperParams,
    opts: &LaplaceOptions,
) -> Result<LatentPosterior> {
    hp.validate(spec)?;
    let cache = GramCache::new(x, spec)?;
    laplace_with_cache(&cache, x, y, spec, hp, opts, None)
}

fn psi(a: &DVector<f64>, f: &DVector<f64>, y: &[f64], m: f64) -> f64 {
    let fit: f64 = y.iter().zip(f.iter()).map(|(&yi, &fi)| log_sigmoid(yi * fi)).sum();
    let centered = f.add_scalar(-m);
    -0.5 * a.dot(&centered) + fit
}

/// Largest prior variance that Newton is always started at directly.
const CONTINUATION_SCALE: f64 = 1e3;

/// Finds the posterior mode. Newton runs from the prior mean (or a better
/// warm start); should that fail on a prior with very large variances, the
/// mode is instead traced from the rescaled prior `K/s` up to `K`.
pub(crate) fn laplace_with_cache(
    cache: &GramCache,
    x: &[Vec<f64>],
    y: &[f64],
    spec: &KernelSpec,
    hp: &HyperParams,
    opts: &LaplaceOptions,
    warm_start: Option<&DVector<f64>>,
) -> Result<LatentPosterior> {
    let n = cache.n();
    check_labels(y, n)?;
    let k = cache.gram(hp)?;
    let m = hp.mean_const;

    let mut start = DVector::zeros(n);
    // a warm start is only taken when it beats the prior mean
    if let Some(a0) = warm_start.filter(|a0| a0.len() == n && a0.iter().all(|v| v.is_finite())) {
        let f0 = (&k * a0).add_scalar(m);
        if psi(a0, &f0, y, m) > psi(&start, &DVector::from_element(n, m), y, m) {
            start = a0.clone();
        }
    }
    let (a, iterations) = match newton(&k, y, m, start, opts) {
        Ok(found) => found,
        Err(e) => {
            let scale = k.diagonal().max();
            if !(scale > CONTINUATION_SCALE) {
                return Err(e);
            }
            log::debug!("Laplace Newton failed ({e}); continuing from the prior scaled by 1/{scale:e}");
            continuation(&k, y, m, scale, opts)?
        }
    };
    let mut post = laplace_posterior_at(cache, x, y, spec, hp, &k, a)?;
    post.iterations = iterations;
    Ok(post)
}

/// Mode of the posterior under prior `tK` for `t` rising from `1/scale` to 1
/// by factors of `e⁴`, keeping `f` fixed across each change of `t`.
fn continuation(k: &DMatrix<f64>, y: &[f64], m: f64, scale: f64, opts: &LaplaceOptions) -> Result<(DVector<f64>, usize)> {
    let mut t = 1.0 / scale;
    let mut a = DVector::zeros(k.nrows());
    let mut total = 0;
    loop {
        let (found, iterations) = newton(&(k * t), y, m, a, opts)?;
        total += iterations;
        if t == 1.0 {
            return Ok((found, total));
        }
        let next = (t * 4f64.exp()).min(1.0);
        a = found * (t / next);
        t = next;
    }
}

/// Newton iterations in the `a = K⁻¹(f - m)` parameterization, which never
/// forms `K⁻¹`. Each step is damped by halving until `Ψ(f)` does not drop.
/// Stops once `‖∇log p(y|f) - a‖∞ < tol·s` with `s = min(1, ‖∇log p‖∞)`,
/// or within `√tol·s` of that when round-off prevents further progress.
/// The relative scale matters for confident fits, where both sides of the
/// stationarity condition are far below 1.
fn newton(
    k: &DMatrix<f64>,
    y: &[f64],
    m: f64,
    mut a: DVector<f64>,
    opts: &LaplaceOptions,
) -> Result<(DVector<f64>, usize)> {
    let n = k.nrows();
    let mut f = (k * &a).add_scalar(m);
    let mut objective = psi(&a, &f, y, m);
    let mut last_gain = f64::INFINITY;
    let mut iterations = 0;
    loop {
        let (d1, w): (Vec<f64>, Vec<f64>) = y
            .iter()
            .zip(f.iter())
            .map(|(&yi, &fi)| {
                let (d1, d2, _) = log_lik_derivatives(yi, fi);
                (d1, -d2)
            })
            .unzip();
        let d1 = DVector::from_vec(d1);
        let residual = (&d1 - &a).amax();
        if !residual.is_finite() {
            return Err(GpError::NewtonDivergence { iterations, residual });
        }
        let scale = d1.amax().max(a.amax()).min(1.0);
        if residual < opts.tol * scale {
            return Ok((a, iterations));
        }
        // no measurable progress left: accept if already close
        let at_floor = last_gain <= 1e-15 * (1.0 + objective.abs());
        if at_floor && residual <= opts.tol.sqrt() * scale {
            log::debug!("Laplace Newton at round-off floor, residual {residual:e}");
            return Ok((a, iterations));
        }
        if iterations >= opts.max_iter {
            return Err(GpError::NewtonDivergence { iterations, residual });
        }
        iterations += 1;

        let w = DVector::from_vec(w);
        let sw = w.map(f64::sqrt);
        let b_mat = DMatrix::from_fn(n, n, |i, j| sw[i] * k[(i, j)] * sw[j]) + DMatrix::identity(n, n);
        let factor = Factorization::new(b_mat)?;
        let b = w.component_mul(&f.add_scalar(-m)) + &d1;
        // (I + WK)⁻¹ b, written so tiny W does not cancel b against itself
        let a_new = if sw.iter().all(|&s| s > 1e-150) {
            sw.component_mul(&factor.solve(&b.component_div(&sw)))
        } else {
            let kb = k * &b;
            &b - sw.component_mul(&factor.solve(&sw.component_mul(&kb)))
        };
        let da = a_new - &a;

        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let a_try = &a + &da * step;
            let f_try = (k * &a_try).add_scalar(m);
            let obj = psi(&a_try, &f_try, y, m);
            if obj.is_finite() && obj >= objective - 1e-12 * (1.0 + objective.abs()) {
                last_gain = obj - objective;
                a = a_try;
                f = f_try;
                objective = obj;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // Ψ cannot be raised along the Newton direction at any step size
            if residual <= opts.tol.sqrt() * scale {
                log::debug!("Laplace Newton stalled near the mode, residual {residual:e}");
                return Ok((a, iterations));
            }
            return Err(GpError::NewtonDivergence { iterations, residual });
        }
    }
}

/// Builds the Laplace posterior, approximate log marginal likelihood and its
/// gradient from a converged `a = K⁻¹(f̂ - m)`.
///
/// ```text
/// log q(y|X) = -½ aᵀ(f̂ - m) + Σ log p(yᵢ|f̂ᵢ) - Σ log Lᵢᵢ
/// ```
///
/// The gradient includes the implicit dependence of the mode on the
/// hyperparameters through the third derivative of the likelihood.
pub(crate) fn laplace_posterior_at(
    cache: &GramCache,
    x: &[Vec<f64>],
    y: &[f64],
    spec: &KernelSpec,
    hp: &HyperParams,
    k: &DMatrix<f64>,
    a: DVector<f64>,
) -> Result<LatentPosterior> {
    let n = cache.n();
    let m = hp.mean_const;
    let f = (k * &a).add_scalar(m);
    let mut d1 = DVector::zeros(n);
    let mut w = DVector::zeros(n);
    let mut d3 = DVector::zeros(n);
    let mut fit = 0.0;
    for i in 0..n {
        let (g1, g2, g3) = log_lik_derivatives(y[i], f[i]);
        d1[i] = g1;
        w[i] = -g2;
        d3[i] = g3;
        fit += log_sigmoid(y[i] * f[i]);
    }
    let sw = w.map(f64::sqrt);
    let b_mat = DMatrix::from_fn(n, n, |i, j| sw[i] * k[(i, j)] * sw[j]) + DMatrix::identity(n, n);
    let factor = Factorization::new(b_mat)?;
    let approx_lml = -0.5 * a.dot(&f.add_scalar(-m)) + fit - factor.half_log_det();
    if !approx_lml.is_finite() {
        return Err(GpError::NonFinite("Laplace log marginal likelihood"));
    }

    // Z = S B⁻¹ S ;  C = L⁻¹ S K
    let b_inv = factor.inverse();
    let z = DMatrix::from_fn(n, n, |i, j| sw[i] * b_inv[(i, j)] * sw[j]);
    let c = factor.solve_lower_mat(&DMatrix::from_fn(n, n, |i, j| sw[i] * k[(i, j)]));
    // s2 = ∂log q/∂f̂ = ½ diag(Σ) ∘ ∇³log p, with diag(Σ) = diag K - diag CᵀC
    let s2 = DVector::from_fn(n, |j, _| {
        let col: f64 = c.column(j).norm_squared();
        0.5 * (k[(j, j)] - col) * d3[j]
    });
    let r = &s2 - &z * (k * &s2);
    let mut fmat = &a * a.transpose() - &z;
    fmat += &r * d1.transpose() + &d1 * r.transpose();
    let mut lml_gradient = cache.contract_gradient(hp, &fmat)?;
    let last = lml_gradient.len() - 1;
    lml_gradient[last] = a.sum() + r.sum();

    Ok(LatentPosterior {
        method: InferenceMethod::Laplace,
        spec: spec.clone(),
        hp: hp.clone(),
        train_x: x.to_vec(),
        labels: y.to_vec(),
        f_hat: f,
        alpha: a,
        sqrt_w: sw,
        factor,
        sites: None,
        approx_lml,
        lml_gradient,
        iterations: 0,
    })
}
