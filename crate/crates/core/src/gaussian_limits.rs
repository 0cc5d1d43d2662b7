//! Gaussian objects of the limit theorems: the within- and cross-block
//! covariances of normalized increments, `μ_f`, `ρ_{f_{m1},f_{m2}}`, the
//! conditional CLT covariance `𝒞(t)` and the LLN limit `V_f(t)`.
//!
//! Every component of an [`EvaluationFunction`] reads a single row of the
//! `K × L` increment matrix, so all expectations reduce to an `L`- or
//! `2L`-dimensional Gaussian vector scaled by one conditional variance `w_k`.
//! Three backends evaluate them: closed forms for absolute powers, Isserlis
//! recursion for polynomial components, and a seeded Monte Carlo with
//! antithetic pairs and common random numbers otherwise.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{abs_moment, gamma_r, gamma_squared_tail_bound, AutocovarianceTable};
use crate::numerics::NeumaierSum;

/// A user-supplied component `f(row) -> value`, where `row` holds the `L`
/// lagged increments of one spatial point.
#[derive(Clone)]
pub struct CustomFn(pub Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>);

impl CustomFn {
    pub fn new(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }
}

impl fmt::Debug for CustomFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CustomFn")
    }
}

/// One output coordinate `f_m` of an evaluation function.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Component {
    /// `|z_{kl}|^p`.
    AbsPower { p: f64, k: usize, l: usize },
    /// `Π_l z_{kl}^{p_l}` over row `k`.
    SignedMonomial { k: usize, exponents: Vec<u32> },
    /// `Π_l |z_{kl}|^{p_l}` over row `k`.
    AbsMultipower { k: usize, exponents: Vec<f64> },
    /// Arbitrary function of row `k` with declared evenness and growth degree.
    #[serde(skip)]
    Custom {
        k: usize,
        func: CustomFn,
        even: bool,
        growth: f64,
    },
}

impl Component {
    pub fn row(&self) -> usize {
        match self {
            Component::AbsPower { k, .. }
            | Component::SignedMonomial { k, .. }
            | Component::AbsMultipower { k, .. }
            | Component::Custom { k, .. } => *k,
        }
    }

    /// Evaluate on the `L` entries of the component's row.
    pub fn eval_row(&self, row: &[f64]) -> f64 {
        match self {
            Component::AbsPower { p, l, .. } => row[*l].abs().powf(*p),
            Component::SignedMonomial { exponents, .. } => {
                exponents.iter().zip(row).map(|(&e, &z)| z.powi(e as i32)).product()
            }
            Component::AbsMultipower { exponents, .. } => exponents
                .iter()
                .zip(row)
                .map(|(&e, &z)| if e == 0.0 { 1.0 } else { z.abs().powf(e) })
                .product(),
            Component::Custom { func, .. } => (func.0)(row),
        }
    }

    /// Degree `h` with `f(c z) = c^h f(z)` for `c > 0`; `None` for custom components.
    pub fn homogeneity(&self) -> Option<f64> {
        match self {
            Component::AbsPower { p, .. } => Some(*p),
            Component::SignedMonomial { exponents, .. } => Some(exponents.iter().map(|&e| e as f64).sum()),
            Component::AbsMultipower { exponents, .. } => Some(exponents.iter().sum()),
            Component::Custom { .. } => None,
        }
    }

    /// Exponent vector over the row when the component is a polynomial.
    pub fn monomial(&self, lags: usize) -> Option<Vec<u32>> {
        let even_int = |p: f64| p >= 0.0 && p.fract() == 0.0 && (p as u64).is_multiple_of(2) && p <= 64.0;
        match self {
            Component::AbsPower { p, l, .. } if even_int(*p) => {
                let mut e = vec![0; lags];
                e[*l] = *p as u32;
                Some(e)
            }
            Component::SignedMonomial { exponents, .. } => Some(exponents.clone()),
            Component::AbsMultipower { exponents, .. } if exponents.iter().all(|&p| even_int(p)) => {
                Some(exponents.iter().map(|&p| p as u32).collect())
            }
            _ => None,
        }
    }

    fn structurally_even(&self) -> Option<bool> {
        match self {
            Component::AbsPower { .. } | Component::AbsMultipower { .. } => Some(true),
            Component::SignedMonomial { exponents, .. } => Some(exponents.iter().sum::<u32>().is_multiple_of(2)),
            Component::Custom { .. } => None,
        }
    }
}

/// `f: R^{K×L} -> R^M`; rows are spatial points, columns lags.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationFunction {
    pub points: usize,
    pub lags: usize,
    pub components: Vec<Component>,
}

impl EvaluationFunction {
    pub fn new(points: usize, lags: usize, components: Vec<Component>) -> Result<Self> {
        let f = Self {
            points,
            lags,
            components,
        };
        f.validate()?;
        Ok(f)
    }

    /// `f(z) = |z|^p` with `K = L = 1`.
    pub fn abs_power(p: f64) -> Result<Self> {
        Self::new(1, 1, vec![Component::AbsPower { p, k: 0, l: 0 }])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidFunction(msg));
        if self.points == 0 || self.lags == 0 {
            return bad("K and L must be at least 1".into());
        }
        if self.components.is_empty() {
            return bad("at least one component is required".into());
        }
        for (m, c) in self.components.iter().enumerate() {
            if c.row() >= self.points {
                return bad(format!("component {m} reads row {} but K = {}", c.row(), self.points));
            }
            match c {
                Component::AbsPower { p, l, .. } => {
                    if !(*p > 0.0 && p.is_finite()) {
                        return bad(format!("component {m}: power {p} must be positive"));
                    }
                    if *l >= self.lags {
                        return bad(format!("component {m} reads lag {l} but L = {}", self.lags));
                    }
                }
                Component::SignedMonomial { exponents, .. } => {
                    if exponents.len() != self.lags {
                        return bad(format!("component {m}: {} exponents for L = {}", exponents.len(), self.lags));
                    }
                }
                Component::AbsMultipower { exponents, .. } => {
                    if exponents.len() != self.lags {
                        return bad(format!("component {m}: {} exponents for L = {}", exponents.len(), self.lags));
                    }
                    if exponents.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
                        return bad(format!("component {m}: exponents must be finite and nonnegative"));
                    }
                }
                Component::Custom { growth, .. } => {
                    if !(*growth >= 0.0 && growth.is_finite()) {
                        return bad(format!("component {m}: growth degree must be finite"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn outputs(&self) -> usize {
        self.components.len()
    }

    /// `m ↦ k(m)`.
    pub fn row_map(&self) -> Vec<usize> {
        self.components.iter().map(Component::row).collect()
    }

    /// Evaluate all components on a `K × L` window stored row-major.
    pub fn evaluate(&self, window: &[f64], out: &mut [f64]) {
        let l = self.lags;
        for (o, c) in out.iter_mut().zip(&self.components) {
            let k = c.row();
            *o = c.eval_row(&window[k * l..(k + 1) * l]);
        }
    }

    /// Evenness `f_m(z) = f_m(-z)` required for the CLT. Custom components are
    /// probed on 128 random points.
    pub fn check_even(&self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = Uniform::new(0.1, 3.0).expect("valid range");
        for (m, c) in self.components.iter().enumerate() {
            match c.structurally_even() {
                Some(true) => {}
                Some(false) => {
                    return Err(Error::InvalidFunction(format!("component {m} is odd")));
                }
                None => {
                    if let Component::Custom { even: false, .. } = c {
                        return Err(Error::InvalidFunction(format!("component {m} is declared non-even")));
                    }
                    let mut z = vec![0.0; self.lags];
                    let mut neg = vec![0.0; self.lags];
                    for _ in 0..128 {
                        let s: f64 = scale.sample(&mut rng);
                        for (zi, ni) in z.iter_mut().zip(neg.iter_mut()) {
                            let v: f64 = StandardNormal.sample(&mut rng);
                            *zi = s * v;
                            *ni = -s * v;
                        }
                        let (a, b) = (c.eval_row(&z), c.eval_row(&neg));
                        if (a - b).abs() > 1e-10 * (1.0 + a.abs()) {
                            return Err(Error::InvalidFunction(format!(
                                "component {m} is not even: f(z) = {a}, f(-z) = {b}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Covariance of `Z` (within one window) or of `(Z⁽¹⁾, Z⁽²⁾)` (windows `r` apart).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBlock {
    pub w: Vec<f64>,
    pub shift: Option<usize>,
    pub cov: DMatrix<f64>,
}

fn check_weights(w: &[f64], points: usize) -> Result<()> {
    if w.len() != points {
        return Err(Error::InvalidFunction(format!("{} weights for K = {points}", w.len())));
    }
    for (index, &value) in w.iter().enumerate() {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(Error::NegativeWeight { index, value });
        }
    }
    Ok(())
}

/// `L × L` Toeplitz matrix `[Γ_{|l1-l2|}]`.
pub fn row_within_cov(alpha: f64, lags: usize) -> DMatrix<f64> {
    DMatrix::from_fn(lags, lags, |i, j| gamma_r(alpha, i.abs_diff(j) as u64))
}

/// `2L × 2L` joint covariance of one row of `(Z⁽¹⁾, Z⁽²⁾)` for shift `r`.
pub fn row_joint_cov(alpha: f64, lags: usize, r: usize) -> DMatrix<f64> {
    let within = row_within_cov(alpha, lags);
    let mut m = DMatrix::zeros(2 * lags, 2 * lags);
    m.view_mut((0, 0), (lags, lags)).copy_from(&within);
    m.view_mut((lags, lags), (lags, lags)).copy_from(&within);
    for l1 in 0..lags {
        for l2 in 0..lags {
            let g = gamma_r(alpha, (l1 as i64 - l2 as i64 + r as i64).unsigned_abs());
            m[(l1, lags + l2)] = g;
            m[(lags + l2, l1)] = g;
        }
    }
    m
}

/// `KL × KL` covariance `Γ_{|l1-l2|} w_k 1_{k1=k2=k}`, index `k L + l`.
pub fn build_within_cov(alpha: f64, f: &EvaluationFunction, w: &[f64]) -> Result<GaussianBlock> {
    check_weights(w, f.points)?;
    let (k_n, l_n) = (f.points, f.lags);
    let row = row_within_cov(alpha, l_n);
    let mut cov = DMatrix::zeros(k_n * l_n, k_n * l_n);
    for k in 0..k_n {
        cov.view_mut((k * l_n, k * l_n), (l_n, l_n)).copy_from(&(&row * w[k]));
    }
    Ok(GaussianBlock {
        w: w.to_vec(),
        shift: None,
        cov,
    })
}

/// `2KL × 2KL` joint covariance of `(Z⁽¹⁾, Z⁽²⁾)` with cross entries
/// `Γ_{|l1-l2+r|} w_k 1_{k1=k2=k}`.
pub fn build_joint_cov(alpha: f64, f: &EvaluationFunction, w: &[f64], r: usize) -> Result<GaussianBlock> {
    if r == 0 {
        return Err(Error::Domain {
            what: "r",
            value: 0.0,
            domain: "r >= 1",
        });
    }
    check_weights(w, f.points)?;
    let (k_n, l_n) = (f.points, f.lags);
    let n = k_n * l_n;
    let row = row_joint_cov(alpha, l_n, r);
    let mut cov = DMatrix::zeros(2 * n, 2 * n);
    for k in 0..k_n {
        for (bi, bj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let src = row.view((bi * l_n, bj * l_n), (l_n, l_n)) * w[k];
            cov.view_mut((bi * n + k * l_n, bj * n + k * l_n), (l_n, l_n)).copy_from(&src);
        }
    }
    if jittered_cholesky(&cov).is_none() {
        return Err(Error::InvalidShift { shift: r });
    }
    Ok(GaussianBlock {
        w: w.to_vec(),
        shift: Some(r),
        cov,
    })
}

/// Lower Cholesky factor, retrying once with `1e-12 · trace / dim` jitter.
pub fn jittered_cholesky(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if let Some(c) = m.clone().cholesky() {
        return Some(c.l());
    }
    let n = m.nrows();
    let jitter = 1e-12 * m.trace() / n as f64;
    let shifted = m + DMatrix::identity(n, n) * jitter.max(f64::MIN_POSITIVE);
    shifted.cholesky().map(|c| c.l())
}

/// Mixed moments `E[Π X_j^{a_j}]` of a centered Gaussian vector through the
/// recursion `E[X_i g(X)] = Σ_j Cov(X_i, X_j) E[∂_j g(X)]`.
pub struct Isserlis<'a> {
    cov: &'a DMatrix<f64>,
    memo: HashMap<Vec<u32>, f64>,
}

impl<'a> Isserlis<'a> {
    pub fn new(cov: &'a DMatrix<f64>) -> Self {
        Self {
            cov,
            memo: HashMap::new(),
        }
    }

    pub fn moment(&mut self, exps: &[u32]) -> f64 {
        let total: u32 = exps.iter().sum();
        if total == 0 {
            return 1.0;
        }
        if total % 2 == 1 {
            return 0.0;
        }
        if let Some(&v) = self.memo.get(exps) {
            return v;
        }
        let i = exps.iter().position(|&e| e > 0).expect("nonzero exponent");
        let mut rest = exps.to_vec();
        rest[i] -= 1;
        let mut acc = 0.0;
        for j in 0..rest.len() {
            if rest[j] == 0 {
                continue;
            }
            let c = self.cov[(i, j)];
            if c == 0.0 {
                continue;
            }
            let mult = rest[j] as f64;
            rest[j] -= 1;
            acc += c * mult * self.moment(&rest);
            rest[j] += 1;
        }
        self.memo.insert(exps.to_vec(), acc);
        acc
    }
}

/// `₂F₁(a, b; 1/2; x)` by its power series, `|x| < 1`.
fn hyp2f1_half(a: f64, b: f64, x: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    for n in 0..10_000 {
        let nf = n as f64;
        term *= (a + nf) * (b + nf) / ((0.5 + nf) * (nf + 1.0)) * x;
        sum += term;
        if term.abs() <= 1e-17 * sum.abs() {
            break;
        }
    }
    sum
}

/// `E|X|^a |Y|^b` for standard normals with correlation `c`.
fn abs_power_cross_moment(a: f64, b: f64, c: f64) -> Result<f64> {
    if (c.abs() - 1.0).abs() < 1e-15 {
        return abs_moment(a + b);
    }
    Ok(abs_moment(a)? * abs_moment(b)? * hyp2f1_half(-a / 2.0, -b / 2.0, c * c))
}

/// Value with a Monte Carlo standard error (zero for exact evaluations).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { value, std_error: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Closed forms where available, Monte Carlo otherwise.
    #[default]
    Auto,
    MonteCarlo,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McOptions {
    /// Antithetic pairs per evaluation.
    pub pairs: usize,
    pub seed: u64,
    /// Maximum acceptable standard error; `None` only reports it.
    pub tolerance: Option<f64>,
    /// Lags evaluated by simulation in series; beyond, the second-order
    /// Hermite term is used.
    pub max_lag: usize,
}

impl Default for McOptions {
    fn default() -> Self {
        Self {
            pairs: 200_000,
            seed: 0x5eed_cafe,
            tolerance: None,
            max_lag: 30,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LimitOptions {
    pub backend: Backend,
    pub mc: McOptions,
    pub r_max: usize,
    pub tail_tolerance: f64,
}

impl Default for LimitOptions {
    fn default() -> Self {
        Self {
            backend: Backend::Auto,
            mc: McOptions::default(),
            r_max: 10_000,
            tail_tolerance: 1e-8,
        }
    }
}

const MC_BATCH: usize = 4096;

/// Streaming mean and co-moment matrix of a small vector, mergeable.
#[derive(Clone, Debug)]
struct Moments {
    n: f64,
    mean: Vec<f64>,
    comoment: Vec<f64>,
}

impl Moments {
    fn new(k: usize) -> Self {
        Self {
            n: 0.0,
            mean: vec![0.0; k],
            comoment: vec![0.0; k * k],
        }
    }

    fn push(&mut self, x: &[f64]) {
        let k = self.mean.len();
        self.n += 1.0;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        for i in 0..k {
            self.mean[i] += delta[i] / self.n;
        }
        for i in 0..k {
            for j in 0..k {
                self.comoment[i * k + j] += delta[i] * (x[j] - self.mean[j]);
            }
        }
    }

    fn merge(&mut self, other: &Moments) {
        if other.n == 0.0 {
            return;
        }
        let k = self.mean.len();
        let n = self.n + other.n;
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        for i in 0..k {
            for j in 0..k {
                self.comoment[i * k + j] +=
                    other.comoment[i * k + j] + delta[i] * delta[j] * self.n * other.n / n;
            }
        }
        for i in 0..k {
            self.mean[i] += delta[i] * other.n / n;
        }
        self.n = n;
    }

    fn cov(&self, i: usize, j: usize) -> f64 {
        self.comoment[i * self.mean.len() + j] / (self.n - 1.0)
    }
}

/// Seeded antithetic Monte Carlo over `N(0, cov)`. `eval` maps a sample to
/// `k` statistics; each unit averages a draw and its negation. Batches are
/// reduced in index order, so results do not depend on the thread count.
fn monte_carlo<F>(cov: &DMatrix<f64>, opts: &McOptions, k: usize, eval: F) -> Result<Moments>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    let dim = cov.nrows();
    let chol = jittered_cholesky(cov)
        .ok_or_else(|| Error::InvalidFunction("Monte Carlo covariance is not positive semidefinite".into()))?;
    let pairs = opts.pairs.max(2);
    let batches = pairs.div_ceil(MC_BATCH);
    let parts: Vec<Moments> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(b as u64);
            let count = MC_BATCH.min(pairs - b * MC_BATCH);
            let mut acc = Moments::new(k);
            let mut xi = vec![0.0; dim];
            let mut x = vec![0.0; dim];
            let mut neg = vec![0.0; dim];
            let mut out_a = vec![0.0; k];
            let mut out_b = vec![0.0; k];
            for _ in 0..count {
                for v in xi.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                for i in 0..dim {
                    let mut s = 0.0;
                    for j in 0..=i {
                        s += chol[(i, j)] * xi[j];
                    }
                    x[i] = s;
                    neg[i] = -s;
                }
                eval(&x, &mut out_a);
                eval(&neg, &mut out_b);
                for (a, b) in out_a.iter_mut().zip(&out_b) {
                    *a = 0.5 * (*a + b);
                }
                acc.push(&out_a);
            }
            acc
        })
        .collect();
    let mut total = Moments::new(k);
    for p in &parts {
        total.merge(p);
    }
    Ok(total)
}

fn check_mc_tolerance(e: Estimate, opts: &McOptions) -> Result<Estimate> {
    match opts.tolerance {
        Some(tol) if e.std_error > tol => Err(Error::MonteCarloTolerance {
            std_error: e.std_error,
            tolerance: tol,
        }),
        _ => Ok(e),
    }
}

/// `E f(Z)` for one component over its row with covariance `scale · Γ`.
fn mean_row(alpha: f64, c: &Component, lags: usize, scale: f64, opts: &LimitOptions) -> Result<Estimate> {
    if scale == 0.0 {
        return Ok(Estimate::exact(c.eval_row(&vec![0.0; lags])));
    }
    let exact_ok = opts.backend == Backend::Auto && c.homogeneity().is_some();
    if exact_ok {
        let unit = match c {
            Component::AbsPower { p, .. } => Some(abs_moment(*p)?),
            _ => c.monomial(lags).map(|e| {
                let cov = row_within_cov(alpha, lags);
                Isserlis::new(&cov).moment(&e)
            }),
        };
        if let Some(v) = unit {
            let h = c.homogeneity().expect("homogeneous");
            return Ok(Estimate::exact(v * scale.powf(h / 2.0)));
        }
    }
    let cov = row_within_cov(alpha, lags) * scale;
    let m = monte_carlo(&cov, &opts.mc, 1, |x, out| out[0] = c.eval_row(x))?;
    let e = Estimate {
        value: m.mean[0],
        std_error: (m.cov(0, 0) / m.n).sqrt(),
    };
    check_mc_tolerance(e, &opts.mc)
}

/// `μ_f(w) = E f(Z)` for `Z` with covariance `Γ_{|l1-l2|} w_k 1_{k1=k2=k}`.
pub fn mu_f(alpha: f64, f: &EvaluationFunction, w: &[f64], opts: &LimitOptions) -> Result<Vec<Estimate>> {
    check_weights(w, f.points)?;
    f.components
        .iter()
        .map(|c| mean_row(alpha, c, f.lags, w[c.row()], opts))
        .collect()
}

/// Exact `E[f1(X) f2(Y)]` at unit scale where a closed form exists. For
/// `r = 0` both act on the same window.
fn exact_cross_moment(alpha: f64, c1: &Component, c2: &Component, lags: usize, r: usize) -> Result<Option<f64>> {
    if let (Component::AbsPower { p: a, l: l1, .. }, Component::AbsPower { p: b, l: l2, .. }) = (c1, c2) {
        let c = if r == 0 {
            gamma_r(alpha, l1.abs_diff(*l2) as u64)
        } else {
            gamma_r(alpha, (*l1 as i64 - *l2 as i64 + r as i64).unsigned_abs())
        };
        if r == 0 && l1 == l2 {
            return Ok(Some(abs_moment(a + b)?));
        }
        return Ok(Some(abs_power_cross_moment(*a, *b, c)?));
    }
    let (Some(e1), Some(e2)) = (c1.monomial(lags), c2.monomial(lags)) else {
        return Ok(None);
    };
    if r == 0 {
        let cov = row_within_cov(alpha, lags);
        let e: Vec<u32> = e1.iter().zip(&e2).map(|(a, b)| a + b).collect();
        Ok(Some(Isserlis::new(&cov).moment(&e)))
    } else {
        let cov = row_joint_cov(alpha, lags, r);
        let e: Vec<u32> = e1.iter().chain(&e2).copied().collect();
        Ok(Some(Isserlis::new(&cov).moment(&e)))
    }
}

/// `Cov(f1(Z⁽¹⁾), f2(Z⁽²⁾))` on one row, covariance scaled by `scale`.
fn rho_row(
    alpha: f64,
    c1: &Component,
    c2: &Component,
    lags: usize,
    r: usize,
    scale: f64,
    opts: &LimitOptions,
) -> Result<Estimate> {
    if scale == 0.0 {
        return Ok(Estimate::exact(0.0));
    }
    let homog = match (c1.homogeneity(), c2.homogeneity()) {
        (Some(h1), Some(h2)) => Some(h1 + h2),
        _ => None,
    };
    if let (Backend::Auto, Some(h)) = (opts.backend, homog) {
        if let Some(cross) = exact_cross_moment(alpha, c1, c2, lags, r)? {
            let m1 = mean_row(alpha, c1, lags, 1.0, opts)?.value;
            let m2 = mean_row(alpha, c2, lags, 1.0, opts)?.value;
            return Ok(Estimate::exact((cross - m1 * m2) * scale.powf(h / 2.0)));
        }
    }
    let moments = if r == 0 {
        let cov = row_within_cov(alpha, lags) * scale;
        monte_carlo(&cov, &opts.mc, 3, |x, out| {
            let (a, b) = (c1.eval_row(x), c2.eval_row(x));
            out.copy_from_slice(&[a, b, a * b]);
        })?
    } else {
        let cov = row_joint_cov(alpha, lags, r) * scale;
        monte_carlo(&cov, &opts.mc, 3, |x, out| {
            let (a, b) = (c1.eval_row(&x[..lags]), c2.eval_row(&x[lags..]));
            out.copy_from_slice(&[a, b, a * b]);
        })?
    };
    Ok(covariance_estimate(&moments))
}

/// `p̄ - ā b̄` with a delta-method standard error from `ψ = p - b̄ a - ā b`.
fn covariance_estimate(m: &Moments) -> Estimate {
    let (a, b) = (m.mean[0], m.mean[1]);
    let value = m.mean[2] - a * b;
    let grad = [-b, -a, 1.0];
    let mut var = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            var += grad[i] * grad[j] * m.cov(i, j);
        }
    }
    Estimate {
        value,
        std_error: (var.max(0.0) / m.n).sqrt(),
    }
}

/// `ρ_{f_{m1}, f_{m2}}(r; w) = Cov(f_{m1}(Z⁽¹⁾), f_{m2}(Z⁽²⁾))`, zero when the
/// components read different rows.
pub fn rho(
    alpha: f64,
    f: &EvaluationFunction,
    m1: usize,
    m2: usize,
    r: usize,
    w: &[f64],
    opts: &LimitOptions,
) -> Result<Estimate> {
    check_weights(w, f.points)?;
    let (c1, c2) = (&f.components[m1], &f.components[m2]);
    if c1.row() != c2.row() {
        return Ok(Estimate::exact(0.0));
    }
    let e = rho_row(alpha, c1, c2, f.lags, r, w[c1.row()], opts)?;
    if e.std_error > 0.0 {
        check_mc_tolerance(e, &opts.mc)
    } else {
        Ok(e)
    }
}

/// `H = E[∇² f(Z)]` over one row, through `E[f(Z)((PZ)(PZ)' - P)]` with
/// `P = Σ⁻¹`.
fn expected_hessian(alpha: f64, c: &Component, lags: usize, scale: f64, opts: &LimitOptions) -> Result<DMatrix<f64>> {
    if let (Backend::Auto, Component::AbsPower { p, l, .. }, Some(_)) = (opts.backend, c, c.homogeneity()) {
        let mut h = DMatrix::zeros(lags, lags);
        h[(*l, *l)] = (abs_moment(p + 2.0)? - abs_moment(*p)?) * scale.powf(p / 2.0 - 1.0);
        return Ok(h);
    }
    let cov = row_within_cov(alpha, lags) * scale;
    let prec = cov
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidFunction("singular window covariance".into()))?;
    if let (Backend::Auto, Some(e)) = (opts.backend, c.monomial(lags)) {
        let mut iss = Isserlis::new(&cov);
        let mean = iss.moment(&e);
        let mut h = DMatrix::zeros(lags, lags);
        for i in 0..lags {
            for j in 0..lags {
                let mut acc = 0.0;
                for s in 0..lags {
                    for t in 0..lags {
                        let mut ee = e.clone();
                        ee[s] += 1;
                        ee[t] += 1;
                        acc += prec[(i, s)] * prec[(j, t)] * iss.moment(&ee);
                    }
                }
                h[(i, j)] = acc - prec[(i, j)] * mean;
            }
        }
        return Ok(h);
    }
    let k = lags * lags;
    let m = monte_carlo(&cov, &opts.mc, k, |x, out| {
        let fx = c.eval_row(x);
        let px = &prec * nalgebra::DVector::from_column_slice(x);
        for i in 0..lags {
            for j in 0..lags {
                out[i * lags + j] = fx * (px[i] * px[j] - prec[(i, j)]);
            }
        }
    })?;
    Ok(DMatrix::from_fn(lags, lags, |i, j| 0.5 * (m.mean[i * lags + j] + m.mean[j * lags + i])))
}

/// Cross-covariance block `C_{ij} = Γ_{|i-j+r|}` between the two windows.
fn cross_block(table: &AutocovarianceTable, lags: usize, r: usize) -> DMatrix<f64> {
    DMatrix::from_fn(lags, lags, |i, j| table.get((i as i64 - j as i64 + r as i64).unsigned_abs() as usize))
}

/// Sum of the `𝒞` series for one pair of components at a fixed scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesValue {
    pub value: f64,
    pub std_error: f64,
    pub r0_term: f64,
    pub tail_estimate: f64,
    pub tail_bound: f64,
}

/// `ρ_{12}(0) + Σ_{r=1}^{R} [ρ_{12}(r) + ρ_{21}(r)]` on one row at covariance
/// scale `scale`, with the omitted tail estimated from the second-order
/// Hermite term `ρ(r) ≈ ½ tr(H₁ C_r H₂ C_r')`.
pub fn rho_series(
    alpha: f64,
    c1: &Component,
    c2: &Component,
    lags: usize,
    scale: f64,
    opts: &LimitOptions,
) -> Result<SeriesValue> {
    let r_max = opts.r_max.max(2);
    let table = AutocovarianceTable::new(alpha, (r_max + 2 * lags) as u64)?;
    let r0 = rho_row(alpha, c1, c2, lags, 0, scale, opts)?;
    let exact = opts.backend == Backend::Auto
        && c1.homogeneity().is_some()
        && c2.homogeneity().is_some()
        && exact_cross_moment(alpha, c1, c2, lags, 1)?.is_some();
    let h1 = expected_hessian(alpha, c1, lags, scale, opts)?;
    let h2 = expected_hessian(alpha, c2, lags, scale, opts)?;
    let quad = |r: usize| {
        let c = cross_block(&table, lags, r) * scale;
        let a = 0.5 * (&h1 * &c * &h2 * c.transpose()).trace();
        let b = 0.5 * (&h2 * &c * &h1 * c.transpose()).trace();
        a + b
    };
    let mut sum = NeumaierSum::new();
    let mut se_sum = r0.std_error;
    sum.add(r0.value);
    let direct_to = if exact { r_max } else { opts.mc.max_lag.min(r_max) };
    for r in 1..=direct_to {
        let a = rho_row(alpha, c1, c2, lags, r, scale, opts)?;
        let b = rho_row(alpha, c2, c1, lags, r, scale, opts)?;
        sum.add(a.value + b.value);
        se_sum += a.std_error + b.std_error;
    }
    for r in direct_to + 1..=r_max {
        sum.add(quad(r));
    }
    let ones = nalgebra::DVector::from_element(lags, 1.0);
    let kappa = (ones.transpose() * &h1 * &ones)[(0, 0)] * (ones.transpose() * &h2 * &ones)[(0, 0)] * scale * scale;
    let beta = 1.0 - alpha / 2.0;
    let c = 0.5 * beta * (beta - 1.0);
    let tail_sq = c * c * (r_max as f64 + 0.5).powf(2.0 * beta - 3.0) / (3.0 - 2.0 * beta);
    let bound_sq = gamma_squared_tail_bound(alpha, r_max as u64);
    Ok(SeriesValue {
        value: sum.value(),
        std_error: se_sum,
        r0_term: r0.value,
        tail_estimate: kappa * tail_sq,
        tail_bound: kappa.abs() * bound_sq,
    })
}

/// Conditional variances `w(s) = σ²(u(s, x_k))` sampled on a time grid;
/// piecewise constant from each grid time to the next, the first cell
/// starting at 0 and the last extending indefinitely.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WPath {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl WPath {
    pub fn new(times: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        let p = Self { times, values };
        p.validate()?;
        Ok(p)
    }

    /// Constant `w` on `[0, ∞)`.
    pub fn constant(w: Vec<f64>) -> Self {
        Self {
            times: vec![0.0],
            values: vec![w],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.is_empty() || self.times.len() != self.values.len() {
            return Err(Error::InvalidDesign("w path needs one value vector per time".into()));
        }
        if self.times.windows(2).any(|p| !(p[1] > p[0])) || self.times[0] < 0.0 {
            return Err(Error::InvalidDesign("w path times must be increasing and nonnegative".into()));
        }
        for v in &self.values {
            for (index, &value) in v.iter().enumerate() {
                if !(value >= 0.0) || !value.is_finite() {
                    return Err(Error::NegativeWeight { index, value });
                }
            }
        }
        Ok(())
    }

    /// `∫_0^t g_j ds` for each `t` in `t_grid`, with `g_j` the integrand on
    /// cell `j` (left Riemann sum).
    pub fn integrate(&self, g: &[f64], t_grid: &[f64]) -> Result<Vec<f64>> {
        if t_grid.windows(2).any(|p| p[1] < p[0]) || t_grid.first().is_some_and(|&t| t < 0.0) {
            return Err(Error::InvalidDesign("t grid must be nondecreasing and nonnegative".into()));
        }
        let n = self.times.len();
        let start = |j: usize| if j == 0 { 0.0 } else { self.times[j] };
        let mut out = Vec::with_capacity(t_grid.len());
        let mut acc = NeumaierSum::new();
        let mut j = 0;
        for &t in t_grid {
            while j + 1 < n && self.times[j + 1] <= t {
                acc.add(g[j] * (self.times[j + 1] - start(j)));
                j += 1;
            }
            out.push(acc.value() + g[j] * (t - start(j)).max(0.0));
        }
        Ok(out)
    }
}

/// Series truncation diagnostics of `𝒞`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesTruncation {
    pub r_max: usize,
    /// Largest `|tail estimate| / |ρ(0)|` over the component pairs.
    pub relative_tail: f64,
    /// Largest tail bound over the component pairs (unit scale).
    pub tail_bound: f64,
    pub within_tolerance: bool,
}

/// Limit objects along a time grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitLaw {
    pub t_grid: Vec<f64>,
    /// `𝒞(t)` as `M × M` nested rows.
    pub c_path: Vec<Vec<Vec<f64>>>,
    pub v_path: Vec<Vec<f64>>,
    pub truncation: SeriesTruncation,
    /// Accumulated Monte Carlo standard error of the unit-scale series.
    pub mc_std_error: f64,
}

/// `V_f(t) = ∫_0^t μ_f(w(s)) ds`.
pub fn limit_lln(
    alpha: f64,
    f: &EvaluationFunction,
    w_path: &WPath,
    t_grid: &[f64],
    opts: &LimitOptions,
) -> Result<Vec<Vec<f64>>> {
    f.validate()?;
    w_path.validate()?;
    let m_n = f.outputs();
    let mut per_m = Vec::with_capacity(m_n);
    for c in &f.components {
        let g: Vec<f64> = match c.homogeneity() {
            Some(h) => {
                let unit = mean_row(alpha, c, f.lags, 1.0, opts)?.value;
                w_path.values.iter().map(|w| unit * w[c.row()].powf(h / 2.0)).collect()
            }
            None => {
                let mut cache: HashMap<u64, f64> = HashMap::new();
                let mut g = Vec::with_capacity(w_path.values.len());
                for w in &w_path.values {
                    let s = w[c.row()];
                    let v = match cache.get(&s.to_bits()) {
                        Some(&v) => v,
                        None => {
                            let v = mean_row(alpha, c, f.lags, s, opts)?.value;
                            cache.insert(s.to_bits(), v);
                            v
                        }
                    };
                    g.push(v);
                }
                g
            }
        };
        per_m.push(w_path.integrate(&g, t_grid)?);
    }
    Ok((0..t_grid.len()).map(|i| per_m.iter().map(|v| v[i]).collect()).collect())
}

/// `𝒞_{m1m2}(t) = ∫_0^t [ρ(0) + Σ_{r>=1} (ρ_{m1m2}(r) + ρ_{m2m1}(r))] ds`
/// with `w = w(s)`, together with `V_f` on the same grid.
pub fn limit_covariance(
    alpha: f64,
    f: &EvaluationFunction,
    w_path: &WPath,
    t_grid: &[f64],
    opts: &LimitOptions,
) -> Result<LimitLaw> {
    f.validate()?;
    w_path.validate()?;
    let m_n = f.outputs();
    let mut c_entries: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; m_n]; m_n]; t_grid.len()];
    let mut relative_tail: f64 = 0.0;
    let mut tail_bound: f64 = 0.0;
    let mut mc_std_error = 0.0;
    let mut unit_cache: HashMap<(usize, usize), SeriesValue> = HashMap::new();
    for m1 in 0..m_n {
        for m2 in m1..m_n {
            let (c1, c2) = (&f.components[m1], &f.components[m2]);
            if c1.row() != c2.row() {
                continue;
            }
            let k = c1.row();
            let g: Vec<f64> = match (c1.homogeneity(), c2.homogeneity()) {
                (Some(h1), Some(h2)) => {
                    let s = match unit_cache.get(&(m1, m2)) {
                        Some(s) => *s,
                        None => {
                            let s = rho_series(alpha, c1, c2, f.lags, 1.0, opts)?;
                            unit_cache.insert((m1, m2), s);
                            s
                        }
                    };
                    if s.r0_term != 0.0 {
                        relative_tail = relative_tail.max((s.tail_estimate / s.r0_term).abs());
                    }
                    tail_bound = tail_bound.max(s.tail_bound);
                    mc_std_error += s.std_error;
                    w_path.values.iter().map(|w| s.value * w[k].powf((h1 + h2) / 2.0)).collect()
                }
                _ => {
                    let mut cache: HashMap<u64, f64> = HashMap::new();
                    let mut g = Vec::with_capacity(w_path.values.len());
                    for w in &w_path.values {
                        let s = w[k];
                        let v = match cache.get(&s.to_bits()) {
                            Some(&v) => v,
                            None => {
                                let v = if s == 0.0 {
                                    0.0
                                } else {
                                    let sv = rho_series(alpha, c1, c2, f.lags, s, opts)?;
                                    if sv.r0_term != 0.0 {
                                        relative_tail = relative_tail.max((sv.tail_estimate / sv.r0_term).abs());
                                    }
                                    tail_bound = tail_bound.max(sv.tail_bound);
                                    sv.value
                                };
                                cache.insert(s.to_bits(), v);
                                v
                            }
                        };
                        g.push(v);
                    }
                    g
                }
            };
            let integral = w_path.integrate(&g, t_grid)?;
            for (ti, v) in integral.into_iter().enumerate() {
                c_entries[ti][m1][m2] = v;
                c_entries[ti][m2][m1] = v;
            }
        }
    }
    let v_path = limit_lln(alpha, f, w_path, t_grid, opts)?;
    Ok(LimitLaw {
        t_grid: t_grid.to_vec(),
        c_path: c_entries,
        v_path,
        truncation: SeriesTruncation {
            r_max: opts.r_max,
            relative_tail,
            tail_bound,
            within_tolerance: relative_tail <= opts.tail_tolerance,
        },
        mc_std_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quad_f() -> EvaluationFunction {
        EvaluationFunction::abs_power(2.0).unwrap()
    }

    fn mc_opts(pairs: usize) -> LimitOptions {
        LimitOptions {
            backend: Backend::MonteCarlo,
            mc: McOptions {
                pairs,
                ..McOptions::default()
            },
            ..LimitOptions::default()
        }
    }

    #[test]
    fn within_cov_examples() {
        let f = quad_f();
        assert_eq!(build_within_cov(0.5, &f, &[4.0]).unwrap().cov, DMatrix::from_element(1, 1, 4.0));
        let f2 = EvaluationFunction::new(1, 2, vec![Component::SignedMonomial { k: 0, exponents: vec![1, 1] }]).unwrap();
        let b = build_within_cov(1.0, &f2, &[1.0]).unwrap();
        let g1 = (2f64.sqrt() - 2.0) / 2.0;
        assert!((b.cov[(0, 1)] - g1).abs() < 1e-15 && (b.cov[(1, 0)] - g1).abs() < 1e-15);
        assert_eq!(b.cov[(0, 0)], 1.0);
        assert!(build_within_cov(0.5, &f2, &[0.0]).unwrap().cov.iter().all(|&v| v == 0.0));
        assert_eq!(
            build_within_cov(0.5, &f, &[-1.0]).unwrap_err(),
            Error::NegativeWeight { index: 0, value: -1.0 }
        );
    }

    #[test]
    fn joint_cov_examples() {
        let f = quad_f();
        let b = build_joint_cov(0.5, &f, &[1.0], 1).unwrap();
        assert_eq!(b.cov[(0, 1)], gamma_r(0.5, 1));
        let far = build_joint_cov(0.5, &f, &[1.0], 100_000).unwrap();
        assert!(far.cov[(0, 1)].abs() < 1e-7);
        // L = 2, r = 2: cross entry (l1, l2) uses Γ_{|l1 - l2 + 2|}.
        let f2 = EvaluationFunction::new(1, 2, vec![Component::SignedMonomial { k: 0, exponents: vec![2, 0] }]).unwrap();
        let j = build_joint_cov(0.7, &f2, &[1.0], 2).unwrap().cov;
        assert_eq!(j[(0, 2)], gamma_r(0.7, 2));
        assert_eq!(j[(0, 3)], gamma_r(0.7, 1));
        assert_eq!(j[(1, 2)], gamma_r(0.7, 3));
        assert_eq!(j[(1, 3)], gamma_r(0.7, 2));
        assert_eq!(j[(2, 1)], j[(1, 2)]);
        // K = 2: no coupling between rows.
        let f3 = EvaluationFunction::new(
            2,
            1,
            vec![Component::AbsPower { p: 2.0, k: 0, l: 0 }, Component::AbsPower { p: 2.0, k: 1, l: 0 }],
        )
        .unwrap();
        let j3 = build_joint_cov(0.5, &f3, &[1.0, 2.0], 1).unwrap().cov;
        assert_eq!(j3[(0, 1)], 0.0);
        assert_eq!(j3[(0, 3)], 0.0);
        assert_eq!(j3[(1, 3)], 2.0 * gamma_r(0.5, 1));
        assert!(build_joint_cov(0.5, &f, &[1.0], 0).is_err());
    }

    #[test]
    fn isserlis_basics() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]);
        let mut iss = Isserlis::new(&cov);
        assert_eq!(iss.moment(&[4, 0]), 3.0);
        assert!((iss.moment(&[2, 2]) - (2.0 + 2.0 * 0.09)).abs() < 1e-15);
        assert!((iss.moment(&[1, 1]) - 0.3).abs() < 1e-15);
        assert_eq!(iss.moment(&[1, 2]), 0.0);
        assert!((iss.moment(&[0, 6]) - 15.0 * 8.0).abs() < 1e-12);
    }

    #[test]
    fn hypergeometric_absolute_moments() {
        // E|X||Y| = (2/π)(sqrt(1 - c²) + c asin c).
        for c in [0.0f64, 0.2, -0.5, 0.9] {
            let want = 2.0 / std::f64::consts::PI * ((1.0 - c * c).sqrt() + c * f64::asin(c));
            assert!((abs_power_cross_moment(1.0, 1.0, c).unwrap() - want).abs() < 1e-14);
        }
        // E X² Y² = 1 + 2c².
        assert!((abs_power_cross_moment(2.0, 2.0, 0.4).unwrap() - 1.32).abs() < 1e-14);
    }

    #[test]
    fn mu_examples() {
        let o = LimitOptions::default();
        assert_eq!(mu_f(0.5, &quad_f(), &[0.7], &o).unwrap()[0].value, 0.7);
        let f4 = EvaluationFunction::abs_power(4.0).unwrap();
        assert!((mu_f(0.5, &f4, &[2.0], &o).unwrap()[0].value - 12.0).abs() < 1e-12);
        let bip = EvaluationFunction::new(1, 2, vec![Component::SignedMonomial { k: 0, exponents: vec![1, 1] }]).unwrap();
        assert!((mu_f(0.3, &bip, &[1.0], &o).unwrap()[0].value - gamma_r(0.3, 1)).abs() < 1e-15);
    }

    #[test]
    fn mu_abs_power_matches_monte_carlo() {
        for p in [1.0, 2.0, 3.0, 4.0] {
            let f = EvaluationFunction::abs_power(p).unwrap();
            let exact = mu_f(0.5, &f, &[1.7], &LimitOptions::default()).unwrap()[0];
            let mc = mu_f(0.5, &f, &[1.7], &mc_opts(200_000)).unwrap()[0];
            assert!((exact.value - mc.value).abs() <= 4.0 * mc.std_error, "p={p}: {exact:?} {mc:?}");
        }
    }

    #[test]
    fn rho_examples() {
        let o = LimitOptions::default();
        let f = quad_f();
        assert!((rho(0.5, &f, 0, 0, 0, &[1.0], &o).unwrap().value - 2.0).abs() < 1e-14);
        for r in 1..6 {
            let g = gamma_r(0.5, r as u64);
            let v = rho(0.5, &f, 0, 0, r, &[1.5], &o).unwrap().value;
            assert!((v - 2.0 * g * g * 2.25).abs() < 1e-14);
        }
        let two_rows = EvaluationFunction::new(
            2,
            1,
            vec![Component::AbsPower { p: 2.0, k: 0, l: 0 }, Component::AbsPower { p: 1.0, k: 1, l: 0 }],
        )
        .unwrap();
        assert_eq!(rho(0.5, &two_rows, 0, 1, 0, &[1.0, 1.0], &o).unwrap(), Estimate::exact(0.0));
    }

    #[test]
    fn rho_quadratic_matches_monte_carlo() {
        let f = quad_f();
        for &alpha in &[0.25, 0.5, 0.75] {
            for r in 0..=10 {
                let exact = 2.0 * gamma_r(alpha, r as u64).powi(2);
                let mc = rho(alpha, &f, 0, 0, r, &[1.0], &mc_opts(100_000)).unwrap();
                assert!(
                    (mc.value - exact).abs() <= 4.0 * mc.std_error.max(1e-15),
                    "alpha={alpha} r={r}: {mc:?} vs {exact}"
                );
            }
        }
    }

    #[test]
    fn monte_carlo_is_thread_count_independent() {
        let f = EvaluationFunction::abs_power(1.0).unwrap();
        let o = mc_opts(50_000);
        let a = rho(0.5, &f, 0, 0, 1, &[1.0], &o).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| rho(0.5, &f, 0, 0, 1, &[1.0], &o).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn mc_tolerance_is_reported() {
        let f = EvaluationFunction::abs_power(1.0).unwrap();
        let mut o = mc_opts(1000);
        o.mc.tolerance = Some(1e-9);
        assert!(matches!(
            rho(0.5, &f, 0, 0, 0, &[1.0], &o),
            Err(Error::MonteCarloTolerance { .. })
        ));
    }

    #[test]
    fn even_polynomial_rho_decays_like_gamma_squared() {
        let f = EvaluationFunction::new(1, 2, vec![Component::AbsMultipower { k: 0, exponents: vec![2.0, 2.0] }]).unwrap();
        let o = LimitOptions::default();
        let rs: Vec<f64> = (10..=100).step_by(10).map(|r| r as f64).collect();
        let lr: Vec<f64> = rs.iter().map(|r| r.ln()).collect();
        let lv: Vec<f64> = rs
            .iter()
            .map(|&r| rho(0.5, &f, 0, 0, r as usize, &[1.0], &o).unwrap().value.abs().ln())
            .collect();
        let lg: Vec<f64> = rs.iter().map(|&r| gamma_r(0.5, r as u64).powi(2).ln()).collect();
        let fit_rho = crate::numerics::fit_line(&lr, &lv);
        let fit_g = crate::numerics::fit_line(&lr, &lg);
        assert!((fit_rho.slope - fit_g.slope).abs() < 0.05, "{} vs {}", fit_rho.slope, fit_g.slope);
    }

    #[test]
    fn hermite_tail_matches_exact_series() {
        // |z| has no closed-form series path under MonteCarlo, but the Auto
        // backend gives exact ρ(r); the second-order term must track it.
        let c = Component::AbsPower { p: 1.0, k: 0, l: 0 };
        let o = LimitOptions {
            r_max: 500,
            ..LimitOptions::default()
        };
        let exact = rho_series(0.5, &c, &c, 1, 1.0, &o).unwrap();
        let approx = rho_series(
            0.5,
            &c,
            &c,
            1,
            1.0,
            &LimitOptions {
                mc: McOptions {
                    max_lag: 0,
                    ..McOptions::default()
                },
                backend: Backend::Auto,
                ..o
            },
        )
        .unwrap();
        assert!((exact.value - approx.value).abs() < 1e-12);
        let h = expected_hessian(0.5, &c, 1, 1.0, &LimitOptions::default()).unwrap()[(0, 0)];
        for r in [20usize, 50, 200] {
            let e = rho_row(0.5, &c, &c, 1, r, 1.0, &LimitOptions::default()).unwrap().value;
            let q = 0.5 * h * h * gamma_r(0.5, r as u64).powi(2);
            assert!((e - q).abs() < 1e-3 * e.abs(), "r={r}: {e} vs {q}");
        }
    }

    #[test]
    fn limit_covariance_quadratic_closed_form() {
        let f = quad_f();
        let law = limit_covariance(0.5, &f, &WPath::constant(vec![1.0]), &[0.0, 0.5, 1.0], &LimitOptions::default()).unwrap();
        let want = 2.0 * (1.0 + 2.0 * crate::kernels::gamma_squared_sum(0.5));
        let got = law.c_path[2][0][0];
        // Truncation at R = 10⁴ drops ≈ 4 Σ_{r>R} Γ_r².
        assert!((got - want).abs() < 5e-8, "{got} vs {want}");
        assert!((law.c_path[1][0][0] - 0.5 * got).abs() < 1e-14);
        assert_eq!(law.c_path[0][0][0], 0.0);
        assert!((law.v_path[2][0] - 1.0).abs() < 1e-15);
        let zero = limit_covariance(0.5, &f, &WPath::constant(vec![0.0]), &[1.0], &LimitOptions::default()).unwrap();
        assert_eq!(zero.c_path[0][0][0], 0.0);
    }

    #[test]
    fn identical_components_give_rank_one_covariance() {
        let c = Component::AbsPower { p: 2.0, k: 0, l: 0 };
        let f = EvaluationFunction::new(1, 1, vec![c.clone(), c]).unwrap();
        let o = LimitOptions {
            r_max: 200,
            ..LimitOptions::default()
        };
        let law = limit_covariance(0.5, &f, &WPath::constant(vec![1.0]), &[1.0], &o).unwrap();
        let m = &law.c_path[0];
        assert_eq!(m[0][0], m[0][1]);
        assert_eq!(m[1][1], m[1][0]);
        assert_eq!(m[0][0], m[1][1]);
    }

    #[test]
    fn lln_examples_and_riemann_order() {
        let o = LimitOptions::default();
        let f3 = EvaluationFunction::abs_power(3.0).unwrap();
        let v = limit_lln(0.5, &f3, &WPath::constant(vec![0.25]), &[0.0, 2.0], &o).unwrap();
        assert_eq!(v[0][0], 0.0);
        assert!((v[1][0] - abs_moment(3.0).unwrap() * 0.125 * 2.0).abs() < 1e-14);
        // w(s) = 1 + s, f = z²: V(1) = 3/2, left Riemann error 1/(2N).
        let f = quad_f();
        let err = |n: usize| {
            let times: Vec<f64> = (0..n).map(|j| j as f64 / n as f64).collect();
            let values = times.iter().map(|t| vec![1.0 + t]).collect();
            let p = WPath::new(times, values).unwrap();
            (limit_lln(0.5, &f, &p, &[1.0], &o).unwrap()[0][0] - 1.5).abs()
        };
        for n in [8, 16, 32] {
            assert!((err(n) / err(2 * n) - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn custom_components() {
        let even = Component::Custom {
            k: 0,
            func: CustomFn::new(|z| z[0].cos()),
            even: true,
            growth: 0.0,
        };
        let f = EvaluationFunction::new(1, 1, vec![even.clone()]).unwrap();
        assert!(f.check_even(1).is_ok());
        let o = mc_opts(100_000);
        // E cos(sqrt(w) Z) = exp(-w/2).
        let mu = mu_f(0.5, &f, &[0.8], &o).unwrap()[0];
        assert!((mu.value - (-0.4f64).exp()).abs() <= 4.0 * mu.std_error);
        assert_eq!(mu_f(0.5, &f, &[0.0], &o).unwrap()[0], Estimate::exact(1.0));
        let odd = Component::Custom {
            k: 0,
            func: CustomFn::new(|z| z[0].sin() + z[0].cos()),
            even: true,
            growth: 1.0,
        };
        assert!(EvaluationFunction::new(1, 1, vec![odd]).unwrap().check_even(1).is_err());
        let sm = EvaluationFunction::new(1, 3, vec![Component::SignedMonomial { k: 0, exponents: vec![1, 0, 2] }]).unwrap();
        assert!(sm.check_even(1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn within_cov_is_psd(alpha in 0.05f64..1.0, lags in 1usize..12, w in 0.0f64..5.0) {
            let f = EvaluationFunction::new(1, lags, vec![Component::AbsPower { p: 2.0, k: 0, l: 0 }]).unwrap();
            let b = build_within_cov(alpha, &f, &[w]).unwrap();
            prop_assert!(b.cov.symmetric_eigenvalues().min() >= -1e-10);
        }

        #[test]
        fn joint_cov_is_psd(alpha in 0.05f64..1.0, lags in 1usize..6, r in 1usize..40) {
            let f = EvaluationFunction::new(1, lags, vec![Component::AbsPower { p: 2.0, k: 0, l: 0 }]).unwrap();
            let b = build_joint_cov(alpha, &f, &[1.0], r).unwrap();
            prop_assert!(b.cov.symmetric_eigenvalues().min() >= -1e-10);
        }

        #[test]
        fn abs_power_mu_is_homogeneous(p in 0.2f64..6.0, w in 0.01f64..10.0, c in 0.01f64..10.0) {
            let f = EvaluationFunction::abs_power(p).unwrap();
            let o = LimitOptions::default();
            let a = mu_f(0.5, &f, &[c * w], &o).unwrap()[0].value;
            let b = mu_f(0.5, &f, &[w], &o).unwrap()[0].value;
            prop_assert!((a - c.powf(p / 2.0) * b).abs() <= 1e-12 * a.abs());
        }

        #[test]
        fn rho_scales_with_weight(p in 0.5f64..4.0, r in 0usize..20, w in 0.01f64..10.0) {
            let f = EvaluationFunction::abs_power(p).unwrap();
            let o = LimitOptions::default();
            let a = rho(0.4, &f, 0, 0, r, &[w], &o).unwrap().value;
            let b = rho(0.4, &f, 0, 0, r, &[1.0], &o).unwrap().value;
            prop_assert!((a - w.powf(p) * b).abs() <= 1e-12 * a.abs().max(1e-300));
        }

        #[test]
        fn limit_covariance_is_psd_and_monotone(w1 in 0.0f64..3.0, w2 in 0.0f64..3.0) {
            let f = EvaluationFunction::new(
                1,
                2,
                vec![
                    Component::AbsPower { p: 2.0, k: 0, l: 0 },
                    Component::AbsMultipower { k: 0, exponents: vec![2.0, 2.0] },
                ],
            )
            .unwrap();
            let path = WPath::new(vec![0.0, 0.5], vec![vec![w1], vec![w2]]).unwrap();
            let o = LimitOptions { r_max: 100, ..LimitOptions::default() };
            let law = limit_covariance(0.5, &f, &path, &[0.25, 0.5, 1.0], &o).unwrap();
            let mut prev: Option<DMatrix<f64>> = None;
            for c in &law.c_path {
                let m = DMatrix::from_fn(2, 2, |i, j| c[i][j]);
                let scale = 1.0 + m.abs().max();
                prop_assert!(m.symmetric_eigenvalues().min() >= -1e-10 * scale);
                if let Some(p) = &prev {
                    prop_assert!((&m - p).symmetric_eigenvalues().min() >= -1e-10 * scale);
                }
                prev = Some(m);
            }
            for pair in law.v_path.windows(2) {
                prop_assert!(pair[1][0] >= pair[0][0] && pair[1][1] >= pair[0][1]);
            }
        }
    }
}
