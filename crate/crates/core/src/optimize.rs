//! Hyperparameter learning by maximizing the (approximate) log marginal
//! likelihood with a limited-memory quasi-Newton method.

use std::collections::VecDeque;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::classification::{
    ep_with_cache, laplace_with_cache, predict_proba, EpOptions, InferenceMethod, LaplaceOptions,
    LatentPosterior, PredictiveClass,
};
use crate::error::{GpError, Result};
use crate::kernels::{GramCache, HyperParams, KernelKind, KernelSpec};
use crate::regression::{fit_with_cache, lml_with_cache, predict_regression, PredictiveGaussian, RegressionPosterior};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizeOptions {
    pub max_iters: usize,
    /// Stop once `‖∇f‖∞` falls below this.
    pub grad_tol: f64,
    /// Stop once an iteration lowers `f` by at most `f_tol·max(1, |f|)`.
    pub f_tol: f64,
    /// Sufficient-decrease constant of the strong Wolfe conditions.
    pub c1: f64,
    /// Curvature constant of the strong Wolfe conditions.
    pub c2: f64,
    /// Number of correction pairs kept by L-BFGS.
    pub memory: usize,
    /// Extra randomly perturbed starts; only used when `seed` is set.
    pub restarts: usize,
    pub seed: Option<u64>,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            grad_tol: 1e-5,
            f_tol: 1e7 * f64::EPSILON,
            c1: 1e-4,
            c2: 0.9,
            memory: 10,
            restarts: 0,
            seed: None,
        }
    }
}

impl OptimizeOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(GpError::InvalidArgument("max_iters must be at least 1".into()));
        }
        if !(self.grad_tol > 0.0) || !(self.f_tol >= 0.0) || !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(GpError::InvalidArgument(
                "tolerances must be positive with 0 < c1 < c2 < 1".into(),
            ));
        }
        if self.memory == 0 {
            return Err(GpError::InvalidArgument("memory must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MinimizeResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    /// Gradient tolerance reached.
    pub converged: bool,
    /// The last line search found no acceptable step; `x` is the best point.
    pub line_search_failed: bool,
    /// Objective values after each accepted iteration, starting with `f(x0)`.
    pub trace: Vec<f64>,
}

type Eval = (f64, Vec<f64>);

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn finite(e: &Eval) -> bool {
    e.0.is_finite() && e.1.iter().all(|v| v.is_finite())
}

/// Minimizes `objective` (value and gradient) from `x0` with L-BFGS and a
/// strong-Wolfe line search. The returned value never exceeds `f(x0)`.
pub fn minimize<E, F>(mut objective: F, x0: &[f64], opts: &OptimizeOptions) -> std::result::Result<MinimizeResult, E>
where
    F: FnMut(&[f64]) -> std::result::Result<Eval, E>,
    E: From<GpError>,
{
    opts.validate()?;
    let start = objective(x0)?;
    if !finite(&start) || start.1.len() != x0.len() {
        return Err(GpError::NonFiniteObjective.into());
    }
    let (mut f, mut g) = start;
    let mut x = x0.to_vec();
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut trace = vec![f];
    let mut iterations = 0;
    let mut converged = false;
    let mut line_search_failed = false;

    while iterations < opts.max_iters {
        if inf_norm(&g) < opts.grad_tol {
            converged = true;
            break;
        }
        let mut d = two_loop(&g, &history);
        if dot(&d, &g) >= 0.0 {
            history.clear();
            d = g.iter().map(|v| -v).collect();
        }
        let alpha0 = if history.is_empty() {
            (1.0 / dot(&d, &d).sqrt()).min(1.0)
        } else {
            1.0
        };
        let found = match strong_wolfe(&mut objective, &x, f, &g, &d, alpha0, opts)? {
            Some(step) => Some(step),
            None if !history.is_empty() => {
                // quasi-Newton direction failed; retry along steepest descent
                history.clear();
                d = g.iter().map(|v| -v).collect();
                let a0 = (1.0 / dot(&d, &d).sqrt()).min(1.0);
                strong_wolfe(&mut objective, &x, f, &g, &d, a0, opts)?
            }
            None => None,
        };
        let Some((alpha, (f_new, g_new))) = found else {
            line_search_failed = true;
            break;
        };
        let s: Vec<f64> = d.iter().map(|v| alpha * v).collect();
        let yv: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&yv, &yv).sqrt() {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s.clone(), yv, 1.0 / sy));
        }
        for (xi, si) in x.iter_mut().zip(&s) {
            *xi += si;
        }
        let decrease = f - f_new;
        f = f_new;
        g = g_new;
        iterations += 1;
        trace.push(f);
        if decrease <= opts.f_tol * f.abs().max(1.0) {
            break;
        }
    }
    if !converged && inf_norm(&g) < opts.grad_tol {
        converged = true;
    }
    Ok(MinimizeResult {
        x,
        f,
        iterations,
        converged,
        line_search_failed,
        trace,
    })
}

fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in &mut q {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter().map(|v| -v).collect()
}

struct Trial {
    alpha: f64,
    f: f64,
    dphi: f64,
    g: Vec<f64>,
}

fn evaluate<E, F>(objective: &mut F, x: &[f64], d: &[f64], alpha: f64) -> std::result::Result<Option<Trial>, E>
where
    F: FnMut(&[f64]) -> std::result::Result<Eval, E>,
{
    let xt: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + alpha * b).collect();
    let e = objective(&xt)?;
    if !finite(&e) {
        return Ok(None);
    }
    let dphi = dot(&e.1, d);
    Ok(Some(Trial {
        alpha,
        f: e.0,
        dphi,
        g: e.1,
    }))
}

/// Cubic minimizer of the Hermite interpolant through two trials, kept
/// inside the middle 80% of the bracket; bisection when it degenerates.
fn interpolate(lo: &Trial, hi_alpha: f64, hi: Option<&Trial>) -> f64 {
    let (a, b) = (lo.alpha, hi_alpha);
    let (left, right) = (a.min(b), a.max(b));
    let width = right - left;
    let mid = 0.5 * (a + b);
    let Some(hi) = hi else { return mid };
    let d1 = lo.dphi + hi.dphi - 3.0 * (lo.f - hi.f) / (a - b);
    let disc = d1 * d1 - lo.dphi * hi.dphi;
    if !(disc >= 0.0) {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (hi.dphi + d2 - d1) / (hi.dphi - lo.dphi + 2.0 * d2);
    if t.is_finite() && t > left + 0.1 * width && t < right - 0.1 * width {
        t
    } else {
        mid
    }
}

fn strong_wolfe<E, F>(
    objective: &mut F,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    d: &[f64],
    alpha0: f64,
    opts: &OptimizeOptions,
) -> std::result::Result<Option<(f64, Eval)>, E>
where
    F: FnMut(&[f64]) -> std::result::Result<Eval, E>,
{
    let dphi0 = dot(g0, d);
    let origin = Trial {
        alpha: 0.0,
        f: f0,
        dphi: dphi0,
        g: g0.to_vec(),
    };
    let armijo = |t: &Trial| t.f <= f0 + opts.c1 * t.alpha * dphi0;
    let curvature = |t: &Trial| t.dphi.abs() <= -opts.c2 * dphi0;

    let mut prev = origin;
    let mut alpha = alpha0;
    let mut first = true;
    // bracketing phase
    let (mut lo, mut hi_alpha, mut hi): (Trial, f64, Option<Trial>) = loop {
        match evaluate(objective, x, d, alpha)? {
            None => break (prev, alpha, None),
            Some(t) if !armijo(&t) || (!first && t.f >= prev.f) => break (prev, t.alpha, Some(t)),
            Some(t) if curvature(&t) => return Ok(Some((t.alpha, (t.f, t.g)))),
            Some(t) if t.dphi >= 0.0 => break (t, prev.alpha, Some(prev)),
            Some(t) => {
                alpha = 2.0 * t.alpha;
                prev = t;
                first = false;
                if alpha > 1e10 {
                    return Ok(Some((prev.alpha, (prev.f, prev.g))));
                }
            }
        }
    };

    // zoom phase
    for _ in 0..40 {
        if (hi_alpha - lo.alpha).abs() <= 1e-14 * lo.alpha.abs().max(1e-10) {
            break;
        }
        let a = interpolate(&lo, hi_alpha, hi.as_ref());
        match evaluate(objective, x, d, a)? {
            None => {
                hi_alpha = a;
                hi = None;
            }
            Some(t) if !armijo(&t) || t.f >= lo.f => {
                hi_alpha = t.alpha;
                hi = Some(t);
            }
            Some(t) => {
                if curvature(&t) {
                    return Ok(Some((t.alpha, (t.f, t.g))));
                }
                if t.dphi * (hi_alpha - lo.alpha) >= 0.0 {
                    hi_alpha = lo.alpha;
                    hi = Some(lo);
                }
                lo = t;
            }
        }
    }
    // sufficient decrease without the curvature condition
    if lo.alpha > 0.0 && lo.f < f0 {
        Ok(Some((lo.alpha, (lo.f, lo.g))))
    } else {
        Ok(None)
    }
}

/// What a model is trained to do.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    Regression,
    /// Binary classification with labels in `{-1, +1}`.
    Classification,
}

/// Inference scheme a trained model ended up using.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InferenceUsed {
    Exact,
    Ep,
    Laplace,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub optimizer: OptimizeOptions,
    /// Requested inference for classification; EP falls back to Laplace.
    pub inference: InferenceMethod,
    pub ep: EpOptions,
    pub laplace: LaplaceOptions,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            optimizer: OptimizeOptions::default(),
            inference: InferenceMethod::Ep,
            ep: EpOptions::default(),
            laplace: LaplaceOptions::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Posterior {
    Regression(RegressionPosterior),
    Latent(LatentPosterior),
}

/// A model refit at its optimized hyperparameters.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub task: Task,
    pub spec: KernelSpec,
    pub hp: HyperParams,
    pub posterior: Posterior,
    /// (Approximate) log marginal likelihood at `hp`.
    pub lml: f64,
    pub inference_used: InferenceUsed,
    pub fallback_triggered: bool,
    pub iterations: usize,
    pub line_search_failed: bool,
}

impl TrainedModel {
    /// `β_s = σ_f,s²` per bag.
    pub fn mixing_weights(&self) -> Vec<f64> {
        self.hp.mixing_weights()
    }

    pub fn predict_proba(&self, x_star: &[f64]) -> Result<PredictiveClass> {
        match &self.posterior {
            Posterior::Latent(post) => predict_proba(post, x_star),
            Posterior::Regression(_) => Err(GpError::InvalidArgument(
                "class probabilities need a classification model".into(),
            )),
        }
    }

    pub fn predict_regression(&self, x_star: &[f64]) -> Result<PredictiveGaussian> {
        match &self.posterior {
            Posterior::Regression(post) => predict_regression(post, x_star),
            Posterior::Latent(_) => Err(GpError::InvalidArgument(
                "predictive targets need a regression model".into(),
            )),
        }
    }

    pub fn train_x(&self) -> &[Vec<f64>] {
        match &self.posterior {
            Posterior::Regression(p) => &p.train_x,
            Posterior::Latent(p) => &p.train_x,
        }
    }
}

/// Conventional starting point: unit amplitudes, bandwidths at the median
/// pairwise distance within each bag, noise 0.1, and the target mean
/// (regression) or zero (classification) as constant mean.
pub fn initial_hyperparams(x: &[Vec<f64>], y: &[f64], spec: &KernelSpec, task: Task) -> Result<HyperParams> {
    let cache = GramCache::new(x, spec)?;
    initial_hyperparams_with_cache(&cache, y, spec, task)
}

pub(crate) fn initial_hyperparams_with_cache(
    cache: &GramCache,
    y: &[f64],
    spec: &KernelSpec,
    task: Task,
) -> Result<HyperParams> {
    let noise = match task {
        Task::Regression => Some(0.1f64.ln()),
        Task::Classification => None,
    };
    let mut hp = HyperParams::unit(spec, noise);
    if spec.kind != KernelKind::Lin {
        hp.log_ell = cache
            .median_distances()
            .into_iter()
            .map(|d| if d > 0.0 && d.is_finite() { d.ln() } else { 0.0 })
            .collect();
    }
    if task == Task::Regression && !y.is_empty() {
        hp.mean_const = y.iter().sum::<f64>() / y.len() as f64;
    }
    Ok(hp)
}

/// Learns hyperparameters from `init_hp` and refits the posterior there.
///
/// Classification first uses the requested inference; if EP fails to
/// converge at any optimizer step, training restarts from `init_hp` with
/// the Laplace approximation and `fallback_triggered` is set.
pub fn train(
    x: &[Vec<f64>],
    y: &[f64],
    spec: &KernelSpec,
    init_hp: &HyperParams,
    task: Task,
    opts: &TrainOptions,
) -> Result<TrainedModel> {
    init_hp.validate(spec)?;
    let cache = GramCache::new(x, spec)?;
    train_with_cache(&cache, x, y, spec, init_hp, task, opts)
}

pub(crate) fn train_with_cache(
    cache: &GramCache,
    x: &[Vec<f64>],
    y: &[f64],
    spec: &KernelSpec,
    init_hp: &HyperParams,
    task: Task,
    opts: &TrainOptions,
) -> Result<TrainedModel> {
    if x.len() != y.len() {
        return Err(GpError::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    match task {
        Task::Regression => {
            if init_hp.log_sigma_n.is_none() {
                return Err(GpError::InvalidArgument("regression needs a noise hyperparameter".into()));
            }
            fit_hyperparams(cache, x, y, spec, init_hp, task, None, opts)
        }
        Task::Classification => {
            if init_hp.log_sigma_n.is_some() {
                return Err(GpError::InvalidArgument("classification has no noise hyperparameter".into()));
            }
            match opts.inference {
                InferenceMethod::Laplace => {
                    fit_hyperparams(cache, x, y, spec, init_hp, task, Some(InferenceMethod::Laplace), opts)
                }
                InferenceMethod::Ep => {
                    match fit_hyperparams(cache, x, y, spec, init_hp, task, Some(InferenceMethod::Ep), opts) {
                        Err(GpError::ConvergenceFailure(ep_msg)) => {
                            log::warn!("EP failed ({ep_msg}); retraining with the Laplace approximation");
                            match fit_hyperparams(cache, x, y, spec, init_hp, task, Some(InferenceMethod::Laplace), opts) {
                                Ok(mut model) => {
                                    model.fallback_triggered = true;
                                    Ok(model)
                                }
                                Err(e) => Err(GpError::InferenceFailed {
                                    ep: ep_msg,
                                    laplace: e.to_string(),
                                }),
                            }
                        }
                        other => other,
                    }
                }
            }
        }
    }
}

/// Value and gradient of the negative (approximate) log marginal likelihood.
/// Only EP non-convergence is propagated; other numerical breakdowns at a
/// trial point read as `+∞` so the line search backs off.
struct Objective<'a> {
    cache: &'a GramCache,
    x: &'a [Vec<f64>],
    y: &'a [f64],
    spec: &'a KernelSpec,
    template: &'a HyperParams,
    method: Option<InferenceMethod>,
    opts: &'a TrainOptions,
    last_mode: Option<DVector<f64>>,
}

impl Objective<'_> {
    fn eval(&mut self, v: &[f64]) -> Result<Eval> {
        let hp = self.template.with_values(v)?;
        let out = match self.method {
            None => lml_with_cache(self.cache, self.y, &hp),
            Some(InferenceMethod::Laplace) => {
                laplace_with_cache(self.cache, self.x, self.y, self.spec, &hp, &self.opts.laplace, self.last_mode.as_ref())
                    .map(|post| {
                        self.last_mode = Some(post.alpha.clone());
                        (post.approx_lml, post.lml_gradient)
                    })
            }
            Some(InferenceMethod::Ep) => ep_with_cache(self.cache, self.x, self.y, self.spec, &hp, &self.opts.ep, None)
                .map(|post| (post.approx_lml, post.lml_gradient)),
        };
        match out {
            Ok((lml, grad)) => Ok((-lml, grad.into_iter().map(|g| -g).collect())),
            Err(e @ GpError::ConvergenceFailure(_)) => Err(e),
            Err(e) => {
                log::debug!("objective breakdown treated as +inf: {e}");
                Ok((f64::INFINITY, vec![f64::NAN; v.len()]))
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn fit_hyperparams(
    cache: &GramCache,
    x: &[Vec<f64>],
    y: &[f64],
    spec: &KernelSpec,
    init_hp: &HyperParams,
    task: Task,
    method: Option<InferenceMethod>,
    opts: &TrainOptions,
) -> Result<TrainedModel> {
    let mut objective = Objective {
        cache,
        x,
        y,
        spec,
        template: init_hp,
        method,
        opts,
        last_mode: None,
    };
    let x0 = init_hp.to_vec();
    let mut best = minimize(|v: &[f64]| objective.eval(v), &x0, &opts.optimizer)?;
    if let Some(seed) = opts.optimizer.seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let jitter = Normal::new(0.0, 0.5).expect("valid normal");
        for _ in 0..opts.optimizer.restarts {
            let start: Vec<f64> = x0.iter().map(|v| v + jitter.sample(&mut rng)).collect();
            objective.last_mode = None;
            match minimize(|v: &[f64]| objective.eval(v), &start, &opts.optimizer) {
                Ok(run) if run.f < best.f => best = run,
                Ok(_) | Err(GpError::NonFiniteObjective) => {}
                Err(e) => return Err(e),
            }
        }
    }

    let hp = init_hp.with_values(&best.x)?;
    let (posterior, lml, inference_used) = match method {
        None => {
            let post = fit_with_cache(cache, x, y, spec, &hp)?;
            let (lml, _) = lml_with_cache(cache, y, &hp)?;
            (Posterior::Regression(post), lml, InferenceUsed::Exact)
        }
        Some(InferenceMethod::Laplace) => {
            let post = laplace_with_cache(cache, x, y, spec, &hp, &opts.laplace, None)?;
            let lml = post.approx_lml;
            (Posterior::Latent(post), lml, InferenceUsed::Laplace)
        }
        Some(InferenceMethod::Ep) => {
            let post = ep_with_cache(cache, x, y, spec, &hp, &opts.ep, None)?;
            let lml = post.approx_lml;
            (Posterior::Latent(post), lml, InferenceUsed::Ep)
        }
    };
    if !lml.is_finite() {
        return Err(GpError::NonFinite("log marginal likelihood at the optimum"));
    }
    Ok(TrainedModel {
        task,
        spec: spec.clone(),
        hp,
        posterior,
        lml,
        inference_used,
        fallback_triggered: false,
        iterations: best.iterations,
        line_search_failed: best.line_search_failed,
    })
}
