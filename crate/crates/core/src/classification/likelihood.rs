//! Logistic likelihood, its derivatives, and the one-dimensional integrals
//! that Gaussian approximations of it require.

use std::f64::consts::{PI, SQRT_2};
use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes used for the averaged predictive probability.
pub const HERMITE_NODES: usize = 61;

/// Above this latent standard deviation the averaged probability switches
/// from Gauss–Hermite to a step decomposition (see [`averaged_probability`]).
const WIDE_STD: f64 = 2.0;

/// `λ(f) = 1 / (1 + e^{-f})`.
#[inline]
pub fn sigmoid(f: f64) -> f64 {
    if f >= 0.0 {
        1.0 / (1.0 + (-f).exp())
    } else {
        let e = f.exp();
        e / (1.0 + e)
    }
}

/// `log λ(f)` without overflow for large `|f|`.
#[inline]
pub fn log_sigmoid(f: f64) -> f64 {
    if f >= 0.0 {
        -(-f).exp().ln_1p()
    } else {
        f - f.exp().ln_1p()
    }
}

/// First three derivatives of `log p(y|f) = log λ(y·f)` for `y ∈ {-1, +1}`.
#[inline]
pub fn log_lik_derivatives(y: f64, f: f64) -> (f64, f64, f64) {
    let (p, q) = (sigmoid(f), sigmoid(-f));
    let w = p * q;
    (y * sigmoid(-y * f), -w, -w * (q - p))
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

#[inline]
fn normal_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    (-0.5 * z * z).exp() / (std * (2.0 * PI).sqrt())
}

/// Golub–Welsch: nodes and weights of the Gauss rule whose monic recurrence
/// has zero diagonal and the given off-diagonal terms.
fn golub_welsch(off_diag: &[f64], mu0: f64) -> (Vec<f64>, Vec<f64>) {
    let n = off_diag.len() + 1;
    let mut jacobi = DMatrix::zeros(n, n);
    for (k, &b) in off_diag.iter().enumerate() {
        jacobi[(k, k + 1)] = b;
        jacobi[(k + 1, k)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], mu0 * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // exact symmetry about zero
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let x = 0.5 * (pairs[j].0 - pairs[i].0);
        let w = 0.5 * (pairs[i].1 + pairs[j].1);
        pairs[i] = (-x, w);
        pairs[j] = (x, w);
    }
    if n % 2 == 1 {
        pairs[n / 2].0 = 0.0;
    }
    pairs.into_iter().unzip()
}

/// Gauss–Hermite rule for `∫ e^{-x²} g(x) dx`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let off: Vec<f64> = (1..n).map(|k| (k as f64 / 2.0).sqrt()).collect();
    golub_welsch(&off, PI.sqrt())
}

/// Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let off: Vec<f64> = (1..n)
        .map(|k| {
            let k = k as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        })
        .collect();
    golub_welsch(&off, 2.0)
}

fn hermite_rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_hermite(HERMITE_NODES))
}

fn legendre_rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(20))
}

/// `∫ λ(f) N(f | mean, variance) df`.
///
/// Uses the 61-node Gauss–Hermite rule while the latent standard deviation is
/// at most 2. Wider Gaussians make `λ` look like a step on the scale of the
/// rule, so there the integral is split as
///
/// ```text
/// Φ(μ/s) + ∫₀^∞ λ(-t) [N(-t|μ,s²) - N(t|μ,s²)] dt
/// ```
///
/// whose integrand is smooth and decays like `e^{-t}`.
pub fn averaged_probability(mean: f64, variance: f64) -> f64 {
    let variance = variance.max(0.0);
    if variance == 0.0 {
        return sigmoid(mean);
    }
    let s = variance.sqrt();
    let p = if s <= WIDE_STD {
        let (nodes, weights) = hermite_rule();
        nodes
            .iter()
            .zip(weights)
            .map(|(&x, &w)| w * sigmoid(mean + SQRT_2 * s * x))
            .sum::<f64>()
            / PI.sqrt()
    } else {
        let (nodes, weights) = legendre_rule();
        let mut correction = 0.0;
        // λ(-40) ≈ 4e-18
        for panel in 0..40 {
            let (a, b) = (panel as f64, panel as f64 + 1.0);
            let (half, mid) = (0.5 * (b - a), 0.5 * (a + b));
            for (&x, &w) in nodes.iter().zip(weights) {
                let t = mid + half * x;
                correction += half * w * sigmoid(-t) * (normal_pdf(-t, mean, s) - normal_pdf(t, mean, s));
            }
        }
        normal_cdf(mean / s) + correction
    };
    p.clamp(0.0, 1.0)
}

/// Normalizer, mean and variance of the tilted distribution
/// `λ(y·f) N(f | mean, variance) / Z`.
///
/// `mean_shift`, `var_ratio` and `var_reduction` restate the mean and
/// variance relative to the input Gaussian: `mean + mean_shift` and
/// `variance·var_ratio` with `var_ratio + var_reduction = 1`. Each of the
/// last two keeps full relative precision when it is the smaller one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TiltedMoments {
    pub log_z: f64,
    pub mean: f64,
    pub variance: f64,
    pub mean_shift: f64,
    pub var_ratio: f64,
    pub var_reduction: f64,
}

impl TiltedMoments {
    /// Site precision and precision-times-mean matching these moments given
    /// the cavity `(tau_c, nu_c)` in natural parameters.
    pub fn site_params(&self, tau_c: f64, nu_c: f64) -> (f64, f64) {
        let tau = self.var_reduction * tau_c / self.var_ratio;
        let nu = (self.mean_shift * tau_c + nu_c * self.var_reduction) / self.var_ratio;
        (tau, nu)
    }
}

// QUADPACK 15-point Kronrod rule with its embedded 7-point Gauss rule.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_5,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_48,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224,
    0.063_092_092_629_978_56,
    0.104_790_010_322_250_19,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_42,
    0.204_432_940_075_298_89,
    0.209_482_141_084_727_82,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_64,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// One Gauss–Kronrod panel for a vector integrand: (Kronrod sums, error).
fn gk15<const K: usize, F: Fn(f64) -> [f64; K]>(g: &F, a: f64, b: f64) -> ([f64; K], [f64; K]) {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut kr = [0.0; K];
    let mut ga = [0.0; K];
    let center = g(mid);
    for c in 0..K {
        kr[c] = WGK[7] * center[c];
        ga[c] = WG[3] * center[c];
    }
    for j in 0..7 {
        let dx = half * XGK[j];
        let (lo, hi) = (g(mid - dx), g(mid + dx));
        for c in 0..K {
            kr[c] += WGK[j] * (lo[c] + hi[c]);
            if j % 2 == 1 {
                ga[c] += WG[j / 2] * (lo[c] + hi[c]);
            }
        }
    }
    let mut err = [0.0; K];
    for c in 0..K {
        kr[c] *= half;
        err[c] = (kr[c] - ga[c] * half).abs();
    }
    (kr, err)
}

struct Panel<const K: usize> {
    a: f64,
    b: f64,
    value: [f64; K],
    err: [f64; K],
}

/// Globally adaptive GK15. Components listed in `controlled` must each reach
/// `rel_tol` relative to their summed magnitude (or the roundoff floor);
/// the panel with the worst relative error is bisected, up to `max_panels`.
fn adaptive<const K: usize, F: Fn(f64) -> [f64; K]>(
    g: &F,
    breaks: &[f64],
    controlled: &[usize],
    rel_tol: f64,
    max_panels: usize,
) -> [f64; K] {
    let panel = |a: f64, b: f64| {
        let (value, err) = gk15(g, a, b);
        Panel { a, b, value, err }
    };
    let mut panels: Vec<Panel<K>> = breaks.windows(2).map(|w| panel(w[0], w[1])).collect();
    loop {
        let mut scale = [0.0f64; K];
        let mut err = [0.0f64; K];
        for p in &panels {
            for c in 0..K {
                scale[c] += p.value[c].abs();
                err[c] += p.err[c];
            }
        }
        let done = controlled
            .iter()
            .all(|&c| err[c] <= (rel_tol * scale[c]).max(50.0 * f64::EPSILON * scale[c]));
        if done || panels.len() >= max_panels {
            break;
        }
        let badness = |p: &Panel<K>| {
            controlled
                .iter()
                .map(|&c| if scale[c] > 0.0 { p.err[c] / scale[c] } else { 0.0 })
                .fold(0.0f64, f64::max)
        };
        let (worst, _) = panels
            .iter()
            .enumerate()
            .max_by(|a, b| badness(a.1).total_cmp(&badness(b.1)))
            .expect("at least one panel");
        let Panel { a, b, .. } = panels.swap_remove(worst);
        let mid = 0.5 * (a + b);
        panels.push(panel(a, mid));
        panels.push(panel(mid, b));
    }
    let mut acc = [0.0; K];
    for p in &panels {
        for (a, v) in acc.iter_mut().zip(&p.value) {
            *a += v;
        }
    }
    acc
}

/// Moments of the tilted distribution for the logistic likelihood.
///
/// Works in standardized coordinates `f = μ + σz`. The log integrand
/// `h(z) = -z²/2 + log λ(y(μ + σz))` is concave with `h'' ≤ -1`, so after
/// locating its mode the integrand is negligible (below `e^{-72}`) outside a
/// ±12 window. Moments are taken about the mode and scaled by `e^{-h(mode)}`
/// so extreme cavities neither overflow nor underflow.
///
/// The variance reduction uses Stein's identity,
/// `1 - Var(z) = -Cov(z, ℓ'(z))` with `ℓ'(z) = yσ λ(-y f)`, integrating
/// whichever of `λ(±y f)` is small at the mode so nothing cancels.
pub fn tilted_moments(y: f64, mean: f64, variance: f64) -> TiltedMoments {
    let sigma = variance.sqrt();
    let h = |z: f64| -0.5 * z * z + log_sigmoid(y * (mean + sigma * z));
    let dh = |z: f64| -z + y * sigma * sigmoid(-y * (mean + sigma * z));

    let (mut lo, mut hi) = if y * sigma >= 0.0 { (0.0, y * sigma) } else { (y * sigma, 0.0) };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if dh(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mode = 0.5 * (lo + hi);
    let h_mode = h(mode);
    // u = λ(-yf) (ℓ' = yσu) where the likelihood is saturated, otherwise
    // u = λ(yf) (ℓ' = yσ - yσu)
    let saturated = y * (mean + sigma * mode) > 0.0;
    let u_sign = if saturated { -y } else { y };
    let cov_factor = if saturated { y * sigma } else { -y * sigma };

    let g = |z: f64| {
        let w = (h(z) - h_mode).exp();
        let d = z - mode;
        let u = sigmoid(u_sign * (mean + sigma * z));
        [w, w * d, w * d * d, w * d * u, w * u]
    };
    let (a, b) = (mode - 12.0, mode + 12.0);
    let step = -mean / sigma;
    // the likelihood turns over within ~1/σ of the step; grade panels
    // geometrically towards it so thin boundary layers are not skipped
    let mut breaks = vec![a, b];
    if step > a && step < b {
        breaks.push(step);
        let mut width = 1.0 / sigma;
        while width < 12.0 {
            breaks.extend([step - width, step + width].into_iter().filter(|&t| t > a && t < b));
            width *= 4.0;
        }
    }
    breaks.sort_by(f64::total_cmp);

    let [m0, m1, m2, du, u0] = adaptive(&g, &breaks, &[0, 3], 1e-10, 400);
    let shift = m1 / m0;
    let var_z = (m2 / m0 - shift * shift).max(0.0);
    // Cov(z, u) = E[(d - shift) u]
    let cov = (du - shift * u0) / m0;
    let stein = (-cov_factor * cov).clamp(0.0, 1.0);
    let (var_ratio, var_reduction) = if stein < 0.5 { (1.0 - stein, stein) } else { (var_z, 1.0 - var_z) };
    TiltedMoments {
        log_z: h_mode + m0.ln() - 0.5 * (2.0 * PI).ln(),
        mean: mean + sigma * (mode + shift),
        variance: variance * var_ratio,
        mean_shift: sigma * (mode + shift),
        var_ratio,
        var_reduction,
    }
}
