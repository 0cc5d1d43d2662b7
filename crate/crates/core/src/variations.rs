//! Normalized increments, variation functionals `V^n_f`, power variations
//! `V^n_p` and the rescaled CLT statistic.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian_limits::{EvaluationFunction, WPath};
use crate::kernels::{tau_n, NoiseParams};
use crate::model::Sigma;
use crate::numerics::NeumaierSum;
use crate::simulate::PathPanel;

const GRID_EPS: f64 = 1e-9;

fn default_modes() -> usize {
    2048
}
fn default_oversampling() -> usize {
    16
}
fn default_substeps() -> usize {
    1
}
fn default_burn_in() -> usize {
    64
}
fn default_cap() -> f64 {
    1e8
}

/// Observation scheme plus the knobs of the internal SPDE scheme.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingDesign {
    pub delta_n: f64,
    pub horizon: f64,
    pub points: Vec<f64>,
    pub lags: usize,
    #[serde(default = "default_modes")]
    pub spatial_modes: usize,
    #[serde(default = "default_oversampling")]
    pub oversampling: usize,
    /// Independent noise draws summed per micro-step; a run with
    /// `oversampling = m, noise_substeps = 2` consumes the same random
    /// numbers as one with `oversampling = 2m`, coupling the two.
    #[serde(default = "default_substeps")]
    pub noise_substeps: usize,
    /// Observation steps skipped by diagnostics that need stationarity.
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default = "default_cap")]
    pub blowup_cap: f64,
}

impl SamplingDesign {
    /// One point at `x = 0`, `L = 1`, horizon `n Δ`.
    pub fn single_point(delta_n: f64, steps: usize) -> Self {
        Self {
            delta_n,
            horizon: delta_n * steps as f64,
            points: vec![0.0],
            lags: 1,
            spatial_modes: default_modes(),
            oversampling: default_oversampling(),
            noise_substeps: default_substeps(),
            burn_in: default_burn_in(),
            blowup_cap: default_cap(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidDesign(m));
        if !(self.delta_n > 0.0 && self.delta_n.is_finite()) {
            return bad(format!("delta_n = {} must be positive", self.delta_n));
        }
        if self.lags == 0 || self.points.is_empty() {
            return bad("need K >= 1 points and L >= 1 lags".into());
        }
        if !(self.horizon >= self.delta_n * (self.lags + 1) as f64 * (1.0 - GRID_EPS)) {
            return bad(format!(
                "horizon {} shorter than delta_n (L + 1) = {}",
                self.horizon,
                self.delta_n * (self.lags + 1) as f64
            ));
        }
        for (i, a) in self.points.iter().enumerate() {
            if !a.is_finite() {
                return bad(format!("point {i} is not finite"));
            }
            if self.points[..i].contains(a) {
                return bad(format!("point {a} repeated"));
            }
        }
        if self.oversampling == 0 || self.noise_substeps == 0 {
            return bad("oversampling and noise_substeps must be at least 1".into());
        }
        if !(self.blowup_cap > 0.0) {
            return bad("blowup_cap must be positive".into());
        }
        Ok(())
    }

    /// `[T / Δ_n]`.
    pub fn steps(&self) -> usize {
        floor_ratio(self.horizon, self.delta_n)
    }

    /// `t(n) = [t/Δ_n] - L + 1`, possibly below 1.
    pub fn window_count(&self, t: f64) -> i64 {
        floor_ratio(t, self.delta_n) as i64 - self.lags as i64 + 1
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps()).map(|i| i as f64 * self.delta_n).collect()
    }
}

/// `[a / b]` tolerant to the representation error of `a = i b`.
fn floor_ratio(a: f64, b: f64) -> usize {
    (a / b + GRID_EPS).floor().max(0.0) as usize
}

/// `(u(iΔ, x_k) - u((i-1)Δ, x_k)) / τ_n`, row `i - 1`, column `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncrementPanel {
    pub values: Vec<Vec<f64>>,
    pub tau_n: f64,
    pub alpha: f64,
    pub delta_n: f64,
}

impl IncrementPanel {
    pub fn rows(&self) -> usize {
        self.values.len()
    }

    pub fn points(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// Increments of a single column.
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[k]).collect()
    }

    /// Panel from one already normalized increment sequence.
    pub fn from_normalized(values: Vec<f64>, alpha: f64, delta_n: f64) -> Result<Self> {
        Ok(Self {
            values: values.into_iter().map(|v| vec![v]).collect(),
            tau_n: tau_n(NoiseParams::new(alpha, 1)?, delta_n)?,
            alpha,
            delta_n,
        })
    }
}

pub fn extract_increments(panel: &PathPanel, design: &SamplingDesign, alpha: f64) -> Result<IncrementPanel> {
    design.validate()?;
    let n = design.steps();
    if panel.values.len() != n + 1 || panel.times.len() != n + 1 {
        return Err(Error::GridMismatch(format!(
            "panel has {} rows, design needs {}",
            panel.values.len(),
            n + 1
        )));
    }
    if panel.points != design.points {
        return Err(Error::GridMismatch("panel points differ from design points".into()));
    }
    for (i, &t) in panel.times.iter().enumerate() {
        let want = i as f64 * design.delta_n;
        if (t - want).abs() > GRID_EPS * want.abs().max(1.0) {
            return Err(Error::GridMismatch(format!("time {i} is {t}, expected {want}")));
        }
    }
    let tau = tau_n(NoiseParams::new(alpha, 1)?, design.delta_n)?;
    let k = design.points.len();
    let mut values = Vec::with_capacity(n);
    for i in 1..=n {
        let (prev, cur) = (&panel.values[i - 1], &panel.values[i]);
        if cur.len() != k {
            return Err(Error::GridMismatch(format!("row {i} has {} columns", cur.len())));
        }
        values.push(cur.iter().zip(prev).map(|(a, b)| (a - b) / tau).collect());
    }
    Ok(IncrementPanel {
        values,
        tau_n: tau,
        alpha,
        delta_n: design.delta_n,
    })
}

fn check_time(t: f64, design: &SamplingDesign) -> Result<()> {
    if !(t >= 0.0) || t > design.horizon * (1.0 + GRID_EPS) {
        return Err(Error::BeyondHorizon {
            t,
            horizon: design.horizon,
        });
    }
    Ok(())
}

/// `V^n_f(t)_m = Δ_n Σ_{i=1}^{t(n)} f_m(window_i)` for each `t` in `t_grid`;
/// zero when `t(n) < 1`. Rows of the result follow `t_grid`.
pub fn variation_functional(
    f: &EvaluationFunction,
    incr: &IncrementPanel,
    design: &SamplingDesign,
    t_grid: &[f64],
) -> Result<Vec<Vec<f64>>> {
    f.validate()?;
    design.validate()?;
    if f.points != incr.points() || f.lags != design.lags {
        return Err(Error::GridMismatch(format!(
            "f expects K = {}, L = {}; panel has K = {}, design L = {}",
            f.points,
            f.lags,
            incr.points(),
            design.lags
        )));
    }
    for &t in t_grid {
        check_time(t, design)?;
    }
    let (k_n, l_n, m_n) = (f.points, f.lags, f.outputs());
    let windows = (incr.rows() + 1).saturating_sub(l_n);
    // prefix[i][m]: Σ over the first i windows.
    let mut prefix = Vec::with_capacity(windows + 1);
    prefix.push(vec![0.0; m_n]);
    let mut acc: Vec<NeumaierSum> = vec![NeumaierSum::new(); m_n];
    let mut window = vec![0.0; k_n * l_n];
    let mut out = vec![0.0; m_n];
    for i in 0..windows {
        for k in 0..k_n {
            for l in 0..l_n {
                window[k * l_n + l] = incr.values[i + l][k];
            }
        }
        f.evaluate(&window, &mut out);
        for (a, v) in acc.iter_mut().zip(&out) {
            a.add(*v);
        }
        prefix.push(acc.iter().map(NeumaierSum::value).collect());
    }
    Ok(t_grid
        .iter()
        .map(|&t| {
            let count = design.window_count(t).clamp(0, windows as i64) as usize;
            prefix[count].iter().map(|s| design.delta_n * s).collect()
        })
        .collect())
}

/// `V^n_p(t) = Δ_n Σ_{i=1}^{[t/Δ_n]} |Δ_i^n u / τ_n|^p` from observations
/// `u(iΔ_n)`, `i = 0..`.
pub fn power_variation(p: f64, series: &[f64], design: &SamplingDesign, alpha: f64, t_grid: &[f64]) -> Result<Vec<f64>> {
    if !(p > 0.0) {
        return Err(Error::Domain {
            what: "p",
            value: p,
            domain: "p > 0",
        });
    }
    design.validate()?;
    let tau = tau_n(NoiseParams::new(alpha, 1)?, design.delta_n)?;
    let n = series.len().saturating_sub(1);
    let mut prefix = Vec::with_capacity(n + 1);
    let mut acc = NeumaierSum::new();
    prefix.push(0.0);
    for w in series.windows(2) {
        acc.add(((w[1] - w[0]) / tau).abs().powf(p));
        prefix.push(acc.value());
    }
    t_grid
        .iter()
        .map(|&t| {
            check_time(t, design)?;
            let count = floor_ratio(t, design.delta_n).min(n);
            Ok(design.delta_n * prefix[count])
        })
        .collect()
}

/// `Δ_n^{-1/2} (V^n_f(t) - V_f(t))` componentwise.
pub fn clt_statistic(vn: &[Vec<f64>], vlimit: &[Vec<f64>], delta_n: f64) -> Result<Vec<Vec<f64>>> {
    if vn.len() != vlimit.len() || vn.iter().zip(vlimit).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::GridMismatch("statistic paths have different shapes".into()));
    }
    let s = delta_n.sqrt().recip();
    Ok(vn
        .iter()
        .zip(vlimit)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| s * (x - y)).collect())
        .collect())
}

/// `w(iΔ_n) = σ²(u(iΔ_n, x_k))` read off a simulated panel, for the
/// path-exact centering `V_f` and covariance `𝒞`.
pub fn path_w(panel: &PathPanel, sigma: &Sigma) -> Result<WPath> {
    WPath::new(
        panel.times.clone(),
        panel
            .values
            .iter()
            .map(|row| row.iter().map(|&u| sigma.eval(u).powi(2)).collect())
            .collect(),
    )
}

/// Variation path as CSV rows `t,m,value`.
pub fn write_variation_csv(mut w: impl Write, t_grid: &[f64], path: &[Vec<f64>]) -> Result<()> {
    writeln!(w, "t,m,value")?;
    for (t, row) in t_grid.iter().zip(path) {
        for (m, v) in row.iter().enumerate() {
            writeln!(w, "{t},{m},{v}")?;
        }
    }
    Ok(())
}
