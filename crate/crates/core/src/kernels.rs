//! Basis covariance functions, their conic sums over feature bags, and
//! Gram matrices with analytic hyperparameter derivatives.
//!
//! Every positive hyperparameter is stored as a logarithm. The mixing weight
//! of bag `s` is `β_s = σ_f,s² = exp(2·log_sigma_f[s])`, so the composite
//!
//! ```text
//! k(x, x') = Σ_s k_s(x_s, x'_s)
//! ```
//!
//! is always a non-negative combination of positive semi-definite kernels.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::subspaces::SubspaceLayout;

/// Basis kernel family. A composite kernel uses one family for every bag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelKind {
    /// `σ_f² · xᵀx'`
    Lin,
    /// `σ_f² · exp(-‖x - x'‖² / 2ℓ²)`
    Se,
    /// Single-hidden-layer network covariance with `Σ = ℓ⁻² I` on `(1, x)`.
    Nn,
}

impl KernelKind {
    /// Hyperparameters per basis kernel (amplitude, plus bandwidth for SE/NN).
    pub fn params_per_kernel(self) -> usize {
        match self {
            KernelKind::Lin => 1,
            KernelKind::Se | KernelKind::Nn => 2,
        }
    }

    pub fn has_bandwidth(self) -> bool {
        self.params_per_kernel() == 2
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Lin => "lin",
            KernelKind::Se => "se",
            KernelKind::Nn => "nn",
        }
    }
}

impl std::str::FromStr for KernelKind {
    type Err = GpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lin" => Ok(KernelKind::Lin),
            "se" => Ok(KernelKind::Se),
            "nn" => Ok(KernelKind::Nn),
            other => Err(GpError::InvalidArgument(format!("unknown kernel kind {other:?}"))),
        }
    }
}

/// A homogeneous composite kernel: one basis kernel of `kind` per bag.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub layout: Arc<SubspaceLayout>,
}

impl KernelSpec {
    /// Composite spec over `layout`. Layouts with more than one bag must keep
    /// the total hyperparameter count below `D + 1`.
    pub fn new(kind: KernelKind, layout: impl Into<Arc<SubspaceLayout>>) -> Result<Self> {
        let layout = layout.into();
        if layout.num_bags() > 1 {
            layout.check_parameter_budget(kind.params_per_kernel())?;
        }
        Ok(Self { kind, layout })
    }

    /// Plain single-kernel spec over all `dim` features.
    pub fn single(kind: KernelKind, dim: usize) -> Result<Self> {
        Self::new(kind, SubspaceLayout::single(dim)?)
    }

    pub fn num_kernels(&self) -> usize {
        self.layout.num_bags()
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }
}

/// Addresses one entry of the flattened hyperparameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Param {
    LogSigmaF(usize),
    LogEll(usize),
    LogSigmaN,
    MeanConst,
}

/// Log-domain hyperparameters of a (composite) GP model.
///
/// The flattened order used by optimizers and gradients is
/// `[log_sigma_f.., log_ell.., log_sigma_n?, mean_const]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub log_sigma_f: Vec<f64>,
    /// Empty for linear kernels.
    pub log_ell: Vec<f64>,
    /// Gaussian noise level; present only for regression.
    pub log_sigma_n: Option<f64>,
    pub mean_const: f64,
}

impl HyperParams {
    /// Unit amplitudes and bandwidths, zero mean, sized for `spec`.
    pub fn unit(spec: &KernelSpec, log_sigma_n: Option<f64>) -> Self {
        let s = spec.num_kernels();
        Self {
            log_sigma_f: vec![0.0; s],
            log_ell: if spec.kind.has_bandwidth() { vec![0.0; s] } else { Vec::new() },
            log_sigma_n,
            mean_const: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.log_sigma_f.len() + self.log_ell.len() + usize::from(self.log_sigma_n.is_some()) + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.log_sigma_f);
        v.extend_from_slice(&self.log_ell);
        v.extend(self.log_sigma_n);
        v.push(self.mean_const);
        v
    }

    /// Same structure as `self`, values taken from `values`.
    pub fn with_values(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.len() {
            return Err(GpError::DimensionMismatch {
                expected: self.len(),
                got: values.len(),
            });
        }
        let s = self.log_sigma_f.len();
        let e = self.log_ell.len();
        let (sf, rest) = values.split_at(s);
        let (ell, rest) = rest.split_at(e);
        let (noise, mean) = if self.log_sigma_n.is_some() {
            (Some(rest[0]), rest[1])
        } else {
            (None, rest[0])
        };
        Ok(Self {
            log_sigma_f: sf.to_vec(),
            log_ell: ell.to_vec(),
            log_sigma_n: noise,
            mean_const: mean,
        })
    }

    pub fn param(&self, index: usize) -> Result<Param> {
        let s = self.log_sigma_f.len();
        let e = self.log_ell.len();
        let noise = usize::from(self.log_sigma_n.is_some());
        if index < s {
            Ok(Param::LogSigmaF(index))
        } else if index < s + e {
            Ok(Param::LogEll(index - s))
        } else if index < s + e + noise {
            Ok(Param::LogSigmaN)
        } else if index == s + e + noise {
            Ok(Param::MeanConst)
        } else {
            Err(GpError::IndexOutOfRange {
                index,
                len: self.len(),
            })
        }
    }

    /// Mixing weights `β_s = σ_f,s²`.
    pub fn mixing_weights(&self) -> Vec<f64> {
        self.log_sigma_f.iter().map(|l| (2.0 * l).exp()).collect()
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_sigma_n.map_or(0.0, |l| (2.0 * l).exp())
    }

    /// Checks sizes against `spec` and that every entry is finite.
    pub fn validate(&self, spec: &KernelSpec) -> Result<()> {
        let s = spec.num_kernels();
        if self.log_sigma_f.len() != s {
            return Err(GpError::DimensionMismatch {
                expected: s,
                got: self.log_sigma_f.len(),
            });
        }
        let e = if spec.kind.has_bandwidth() { s } else { 0 };
        if self.log_ell.len() != e {
            return Err(GpError::DimensionMismatch {
                expected: e,
                got: self.log_ell.len(),
            });
        }
        if self.to_vec().iter().any(|v| !v.is_finite()) {
            return Err(GpError::NonFinite("hyperparameters"));
        }
        Ok(())
    }
}

fn check_pair(xi: &[f64], xj: &[f64]) -> Result<()> {
    if xi.len() != xj.len() {
        return Err(GpError::DimensionMismatch {
            expected: xi.len(),
            got: xj.len(),
        });
    }
    if xi.iter().chain(xj).any(|v| !v.is_finite()) {
        return Err(GpError::NonFinite("kernel input"));
    }
    Ok(())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

// The closed forms below are shared by direct evaluation and the cached
// Gram path so both produce identical bits.

#[inline]
fn lin_from_dot(p: f64, log_sigma_f: f64) -> f64 {
    (2.0 * log_sigma_f).exp() * p
}

#[inline]
fn se_from_sq_dist(d2: f64, log_ell: f64, log_sigma_f: f64) -> f64 {
    (2.0 * log_sigma_f).exp() * (-0.5 * d2 * (-2.0 * log_ell).exp()).exp()
}

/// `asin` argument of the NN kernel given augmented products
/// `p = 1 + xᵢ·xⱼ`, `qi = 1 + xᵢ·xᵢ`, `qj = 1 + xⱼ·xⱼ`.
#[inline]
fn nn_argument(p: f64, qi: f64, qj: f64, log_ell: f64) -> f64 {
    let c = (-2.0 * log_ell).exp();
    let u = 2.0 * c * p / ((1.0 + 2.0 * c * qi) * (1.0 + 2.0 * c * qj)).sqrt();
    u.clamp(-1.0, 1.0)
}

#[inline]
fn nn_from_products(p: f64, qi: f64, qj: f64, log_ell: f64, log_sigma_f: f64) -> f64 {
    (2.0 * log_sigma_f).exp() * nn_argument(p, qi, qj, log_ell).asin()
}

/// Linear kernel `σ_f² · xᵢ·xⱼ`.
pub fn kernel_lin(xi: &[f64], xj: &[f64], log_sigma_f: f64) -> Result<f64> {
    check_pair(xi, xj)?;
    Ok(lin_from_dot(dot(xi, xj), log_sigma_f))
}

/// Squared-exponential kernel with bandwidth `ℓ = exp(log_ell)`.
pub fn kernel_se(xi: &[f64], xj: &[f64], log_ell: f64, log_sigma_f: f64) -> Result<f64> {
    check_pair(xi, xj)?;
    Ok(se_from_sq_dist(sq_dist(xi, xj), log_ell, log_sigma_f))
}

/// Neural-network kernel over augmented inputs `x̃ = (1, x)` with `Σ = ℓ⁻² I`:
///
/// ```text
/// σ_f² · asin( 2x̃ᵢᵀΣx̃ⱼ / sqrt((1 + 2x̃ᵢᵀΣx̃ᵢ)(1 + 2x̃ⱼᵀΣx̃ⱼ)) )
/// ```
pub fn kernel_nn(xi: &[f64], xj: &[f64], log_ell: f64, log_sigma_f: f64) -> Result<f64> {
    check_pair(xi, xj)?;
    Ok(nn_from_products(
        1.0 + dot(xi, xj),
        1.0 + dot(xi, xi),
        1.0 + dot(xj, xj),
        log_ell,
        log_sigma_f,
    ))
}

fn basis_kernel(kind: KernelKind, xi: &[f64], xj: &[f64], hp: &HyperParams, s: usize) -> f64 {
    match kind {
        KernelKind::Lin => lin_from_dot(dot(xi, xj), hp.log_sigma_f[s]),
        KernelKind::Se => se_from_sq_dist(sq_dist(xi, xj), hp.log_ell[s], hp.log_sigma_f[s]),
        KernelKind::Nn => nn_from_products(
            1.0 + dot(xi, xj),
            1.0 + dot(xi, xi),
            1.0 + dot(xj, xj),
            hp.log_ell[s],
            hp.log_sigma_f[s],
        ),
    }
}

fn gather(x: &[f64], bag: &[usize], out: &mut Vec<f64>) {
    out.clear();
    out.extend(bag.iter().map(|&i| x[i]));
}

/// Conic sum of the per-bag basis kernels.
pub fn composite_kernel(xi: &[f64], xj: &[f64], spec: &KernelSpec, hp: &HyperParams) -> Result<f64> {
    hp.validate(spec)?;
    check_pair(xi, xj)?;
    if xi.len() != spec.dim() {
        return Err(GpError::DimensionMismatch {
            expected: spec.dim(),
            got: xi.len(),
        });
    }
    Ok(composite_unchecked(xi, xj, spec, hp, &mut Vec::new(), &mut Vec::new()))
}

fn composite_unchecked(
    xi: &[f64],
    xj: &[f64],
    spec: &KernelSpec,
    hp: &HyperParams,
    bi: &mut Vec<f64>,
    bj: &mut Vec<f64>,
) -> f64 {
    let mut k = 0.0;
    for (s, bag) in spec.layout.bags().iter().enumerate() {
        gather(xi, bag, bi);
        gather(xj, bag, bj);
        k += basis_kernel(spec.kind, bi, bj, hp, s);
    }
    k
}

/// Covariances between `x_star` and every row of `x`, plus `k(x_star, x_star)`.
pub fn cross_covariance(
    x: &[Vec<f64>],
    x_star: &[f64],
    spec: &KernelSpec,
    hp: &HyperParams,
) -> Result<(Vec<f64>, f64)> {
    hp.validate(spec)?;
    if x_star.len() != spec.dim() {
        return Err(GpError::DimensionMismatch {
            expected: spec.dim(),
            got: x_star.len(),
        });
    }
    if x_star.iter().any(|v| !v.is_finite()) {
        return Err(GpError::NonFinite("test input"));
    }
    let (mut bi, mut bj) = (Vec::new(), Vec::new());
    let ks = x
        .iter()
        .map(|xi| composite_unchecked(xi, x_star, spec, hp, &mut bi, &mut bj))
        .collect();
    let kss = composite_unchecked(x_star, x_star, spec, hp, &mut bi, &mut bj);
    Ok((ks, kss))
}

/// Dense symmetric covariance matrix over a set of inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    pub values: DMatrix<f64>,
}

impl GramMatrix {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    pub fn trace(&self) -> f64 {
        self.values.trace()
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.values
    }
}

/// Gram matrix of the composite kernel over the rows of `x`.
pub fn gram(x: &[Vec<f64>], spec: &KernelSpec, hp: &HyperParams) -> Result<GramMatrix> {
    let cache = GramCache::new(x, spec)?;
    Ok(GramMatrix {
        values: cache.gram(hp)?,
    })
}

/// `∂K/∂θ` for the log-domain parameter at `param_index`. Noise and mean
/// entries do not enter `K` and yield a zero matrix.
pub fn gram_gradient(
    x: &[Vec<f64>],
    spec: &KernelSpec,
    hp: &HyperParams,
    param_index: usize,
) -> Result<DMatrix<f64>> {
    let cache = GramCache::new(x, spec)?;
    cache.gram_gradient(hp, param_index)
}

#[inline]
fn packed(i: usize, j: usize) -> usize {
    debug_assert!(j <= i);
    i * (i + 1) / 2 + j
}

/// Per-bag pairwise statistics over a fixed set of inputs.
///
/// Evaluating the composite Gram for new hyperparameters only needs, per bag,
/// the pairwise squared distances (SE) or inner products (LIN, NN). These are
/// computed once here, so objective evaluations during hyperparameter search
/// cost `O(S·N²)` instead of `O(N²·D)`.
#[derive(Clone, Debug)]
pub struct GramCache {
    kind: KernelKind,
    n: usize,
    num_bags: usize,
    /// Packed lower triangle per bag: squared distances (SE) or dot products.
    pairs: Vec<Vec<f64>>,
}

impl GramCache {
    pub fn new(x: &[Vec<f64>], spec: &KernelSpec) -> Result<Self> {
        if x.is_empty() {
            return Err(GpError::Empty("input matrix"));
        }
        let d = spec.dim();
        for row in x {
            if row.len() != d {
                return Err(GpError::DimensionMismatch {
                    expected: d,
                    got: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(GpError::NonFinite("input matrix"));
            }
        }
        let n = x.len();
        let kind = spec.kind;
        let pairs = spec
            .layout
            .bags()
            .par_iter()
            .map(|bag| {
                let sub: Vec<Vec<f64>> = x.iter().map(|r| bag.iter().map(|&i| r[i]).collect()).collect();
                let mut out = Vec::with_capacity(n * (n + 1) / 2);
                for i in 0..n {
                    for j in 0..=i {
                        out.push(match kind {
                            KernelKind::Se => sq_dist(&sub[i], &sub[j]),
                            KernelKind::Lin | KernelKind::Nn => dot(&sub[i], &sub[j]),
                        });
                    }
                }
                out
            })
            .collect();
        Ok(Self {
            kind,
            n,
            num_bags: spec.num_kernels(),
            pairs,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn num_bags(&self) -> usize {
        self.num_bags
    }

    /// Restriction to the inputs at `rows` (in that order).
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.n) {
            return Err(GpError::IndexOutOfRange {
                index: bad,
                len: self.n,
            });
        }
        if rows.is_empty() {
            return Err(GpError::Empty("row subset"));
        }
        let m = rows.len();
        let pairs = self
            .pairs
            .iter()
            .map(|bag| {
                let mut out = Vec::with_capacity(m * (m + 1) / 2);
                for i in 0..m {
                    for j in 0..=i {
                        let (a, b) = (rows[i].max(rows[j]), rows[i].min(rows[j]));
                        out.push(bag[packed(a, b)]);
                    }
                }
                out
            })
            .collect();
        Ok(Self {
            kind: self.kind,
            n: m,
            num_bags: self.num_bags,
            pairs,
        })
    }

    /// Median Euclidean distance over distinct input pairs, per bag. Zero when
    /// fewer than two inputs exist.
    pub fn median_distances(&self) -> Vec<f64> {
        self.pairs
            .iter()
            .map(|bag| {
                let mut d = Vec::with_capacity(self.n * self.n.saturating_sub(1) / 2);
                for i in 1..self.n {
                    for j in 0..i {
                        let sq = match self.kind {
                            KernelKind::Se => bag[packed(i, j)],
                            KernelKind::Lin | KernelKind::Nn => {
                                bag[packed(i, i)] + bag[packed(j, j)] - 2.0 * bag[packed(i, j)]
                            }
                        };
                        d.push(sq.max(0.0).sqrt());
                    }
                }
                if d.is_empty() {
                    return 0.0;
                }
                d.sort_by(f64::total_cmp);
                let m = d.len();
                if m % 2 == 1 {
                    d[m / 2]
                } else {
                    0.5 * (d[m / 2 - 1] + d[m / 2])
                }
            })
            .collect()
    }

    fn check(&self, hp: &HyperParams) -> Result<()> {
        let s = self.num_bags;
        if hp.log_sigma_f.len() != s {
            return Err(GpError::DimensionMismatch {
                expected: s,
                got: hp.log_sigma_f.len(),
            });
        }
        let e = if self.kind.has_bandwidth() { s } else { 0 };
        if hp.log_ell.len() != e {
            return Err(GpError::DimensionMismatch {
                expected: e,
                got: hp.log_ell.len(),
            });
        }
        if hp.to_vec().iter().any(|v| !v.is_finite()) {
            return Err(GpError::NonFinite("hyperparameters"));
        }
        Ok(())
    }

    #[inline]
    fn entry(&self, bag: &[f64], i: usize, j: usize, hp: &HyperParams, s: usize) -> f64 {
        match self.kind {
            KernelKind::Lin => lin_from_dot(bag[packed(i, j)], hp.log_sigma_f[s]),
            KernelKind::Se => se_from_sq_dist(bag[packed(i, j)], hp.log_ell[s], hp.log_sigma_f[s]),
            KernelKind::Nn => nn_from_products(
                1.0 + bag[packed(i, j)],
                1.0 + bag[packed(i, i)],
                1.0 + bag[packed(j, j)],
                hp.log_ell[s],
                hp.log_sigma_f[s],
            ),
        }
    }

    /// Contribution of a single bag to the Gram matrix.
    pub fn bag_gram(&self, hp: &HyperParams, s: usize) -> Result<DMatrix<f64>> {
        self.check(hp)?;
        let bag = self.pairs.get(s).ok_or(GpError::IndexOutOfRange {
            index: s,
            len: self.num_bags,
        })?;
        let mut k = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for j in 0..=i {
                let v = self.entry(bag, i, j, hp, s);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        Ok(k)
    }

    /// Composite Gram matrix; the lower triangle is computed and mirrored.
    pub fn gram(&self, hp: &HyperParams) -> Result<DMatrix<f64>> {
        self.check(hp)?;
        let mut k = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for j in 0..=i {
                let mut v = 0.0;
                for (s, bag) in self.pairs.iter().enumerate() {
                    v += self.entry(bag, i, j, hp, s);
                }
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        Ok(k)
    }

    /// Derivatives of one bag's entry `(i, j)` with respect to its
    /// `log_sigma_f` and `log_ell`.
    #[inline]
    fn entry_derivatives(&self, bag: &[f64], i: usize, j: usize, hp: &HyperParams, s: usize) -> (f64, f64) {
        let lsf = hp.log_sigma_f[s];
        match self.kind {
            KernelKind::Lin => (2.0 * lin_from_dot(bag[packed(i, j)], lsf), 0.0),
            KernelKind::Se => {
                let d2 = bag[packed(i, j)];
                let k = se_from_sq_dist(d2, hp.log_ell[s], lsf);
                (2.0 * k, k * d2 * (-2.0 * hp.log_ell[s]).exp())
            }
            KernelKind::Nn => {
                let le = hp.log_ell[s];
                let (p, qi, qj) = (
                    1.0 + bag[packed(i, j)],
                    1.0 + bag[packed(i, i)],
                    1.0 + bag[packed(j, j)],
                );
                let sf2 = (2.0 * lsf).exp();
                let u = nn_argument(p, qi, qj, le);
                let k = sf2 * u.asin();
                let c = (-2.0 * le).exp();
                // du/dlog_ell = -2u (1 - c·qi/(1+2c·qi) - c·qj/(1+2c·qj))
                let du = -2.0 * u * (1.0 - c * qi / (1.0 + 2.0 * c * qi) - c * qj / (1.0 + 2.0 * c * qj));
                let denom = (1.0 - u * u).max(0.0).sqrt();
                let dk = if denom > 0.0 { sf2 * du / denom } else { 0.0 };
                (2.0 * k, dk)
            }
        }
    }

    /// Explicit `∂K/∂θ` for the flattened parameter `param_index`.
    pub fn gram_gradient(&self, hp: &HyperParams, param_index: usize) -> Result<DMatrix<f64>> {
        self.check(hp)?;
        let mut dk = DMatrix::zeros(self.n, self.n);
        let (s, use_ell) = match hp.param(param_index)? {
            Param::LogSigmaF(s) => (s, false),
            Param::LogEll(s) => (s, true),
            Param::LogSigmaN | Param::MeanConst => return Ok(dk),
        };
        let bag = &self.pairs[s];
        for i in 0..self.n {
            for j in 0..=i {
                let (d_sf, d_ell) = self.entry_derivatives(bag, i, j, hp, s);
                let v = if use_ell { d_ell } else { d_sf };
                dk[(i, j)] = v;
                dk[(j, i)] = v;
            }
        }
        Ok(dk)
    }

    /// `½ Σᵢⱼ Fᵢⱼ ∂Kᵢⱼ/∂θ` for every flattened parameter `θ`, with zeros in the
    /// noise and mean slots. `f` is symmetrized before contraction.
    ///
    /// Every marginal-likelihood gradient in this crate reduces to this form
    /// for an appropriate `F`.
    pub fn contract_gradient(&self, hp: &HyperParams, f: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.check(hp)?;
        if f.nrows() != self.n || f.ncols() != self.n {
            return Err(GpError::DimensionMismatch {
                expected: self.n,
                got: f.nrows(),
            });
        }
        let s_count = self.num_bags;
        let per_bag: Vec<(f64, f64)> = (0..s_count)
            .into_par_iter()
            .map(|s| {
                let bag = &self.pairs[s];
                let (mut g_sf, mut g_ell) = (0.0, 0.0);
                for i in 0..self.n {
                    for j in 0..=i {
                        let w = if i == j {
                            0.5 * f[(i, i)]
                        } else {
                            0.5 * (f[(i, j)] + f[(j, i)])
                        };
                        let (d_sf, d_ell) = self.entry_derivatives(bag, i, j, hp, s);
                        g_sf += w * d_sf;
                        g_ell += w * d_ell;
                    }
                }
                (g_sf, g_ell)
            })
            .collect();
        let mut grad = vec![0.0; hp.len()];
        for (s, (g_sf, g_ell)) in per_bag.into_iter().enumerate() {
            grad[s] = g_sf;
            if self.kind.has_bandwidth() {
                grad[s_count + s] = g_ell;
            }
        }
        Ok(grad)
    }
}
