//! Sample paths: exact stationary increments of the additive solution at one
//! point (circulant embedding) and full SPDE paths on the unit torus by a
//! spectral exponential-Euler scheme.

use std::f64::consts::PI;
use std::io::{BufRead, Read, Write};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use realfft::num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{gamma_r, tau_n, NoiseParams};
use crate::model::ModelSpec;
use crate::numerics::{fit_line, LineFit};
use crate::rng::RngStream;
use crate::variations::SamplingDesign;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathMeta {
    pub scheme: String,
    pub master_seed: u64,
    pub stream_id: u64,
    pub oversampling: usize,
    pub spatial_modes: usize,
}

/// Observations `u(iΔ_n, x_k)`: one row per time, one column per point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathPanel {
    pub times: Vec<f64>,
    pub points: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub meta: PathMeta,
}

const BINARY_MAGIC: &[u8; 8] = b"SHVPATH1";

impl PathPanel {
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[k]).collect()
    }

    /// CSV with header `time,x_1,...,x_K`; a leading comment line records
    /// the point coordinates.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let coords: Vec<String> = self.points.iter().map(|x| x.to_string()).collect();
        writeln!(w, "# points {}", coords.join(" "))?;
        let header: Vec<String> = (1..=self.points.len()).map(|k| format!("x_{k}")).collect();
        writeln!(w, "time,{}", header.join(","))?;
        for (t, row) in self.times.iter().zip(&self.values) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{t},{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv(r: impl BufRead) -> Result<Self> {
        let mut points = Vec::new();
        let mut times = Vec::new();
        let mut values = Vec::new();
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Io(format!("bad number {s:?}: {e}")))
        };
        for line in r.lines() {
            let line = line?;
            if let Some(rest) = line.strip_prefix("# points") {
                points = rest.split_whitespace().map(parse).collect::<Result<_>>()?;
                continue;
            }
            if line.starts_with("time") || line.trim().is_empty() {
                continue;
            }
            let mut cells = line.split(',');
            times.push(parse(cells.next().unwrap_or(""))?);
            values.push(cells.map(parse).collect::<Result<Vec<f64>>>()?);
        }
        Ok(Self {
            times,
            points,
            values,
            meta: PathMeta {
                scheme: "csv".into(),
                master_seed: 0,
                stream_id: 0,
                oversampling: 0,
                spatial_modes: 0,
            },
        })
    }

    /// Little-endian layout: magic `SHVPATH1`, `u64` row count `n`, `u64`
    /// point count `K`, `K` point coordinates, then `n` rows of `1 + K`
    /// `f64` values (time first).
    pub fn write_binary(&self, mut w: impl Write) -> Result<()> {
        w.write_all(BINARY_MAGIC)?;
        w.write_all(&(self.times.len() as u64).to_le_bytes())?;
        w.write_all(&(self.points.len() as u64).to_le_bytes())?;
        for x in &self.points {
            w.write_all(&x.to_le_bytes())?;
        }
        for (t, row) in self.times.iter().zip(&self.values) {
            w.write_all(&t.to_le_bytes())?;
            for v in row {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(Error::Io("not a path panel file".into()));
        }
        let mut b = [0u8; 8];
        let mut next = |r: &mut dyn Read| -> Result<[u8; 8]> {
            r.read_exact(&mut b)?;
            Ok(b)
        };
        let n = u64::from_le_bytes(next(&mut r)?) as usize;
        let k = u64::from_le_bytes(next(&mut r)?) as usize;
        let points = (0..k)
            .map(|_| Ok(f64::from_le_bytes(next(&mut r)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut times = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            times.push(f64::from_le_bytes(next(&mut r)?));
            values.push(
                (0..k)
                    .map(|_| Ok(f64::from_le_bytes(next(&mut r)?)))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(Self {
            times,
            points,
            values,
            meta: PathMeta {
                scheme: "binary".into(),
                master_seed: 0,
                stream_id: 0,
                oversampling: 0,
                spatial_modes: 0,
            },
        })
    }
}

const EMBEDDING_NEGATIVE_TOL: f64 = -1e-10;

/// Davies–Harte circulant embedding of the Toeplitz covariance `[Γ_{|i-j|}]`.
pub struct CirculantEmbedding {
    alpha: f64,
    n: usize,
    size: usize,
    eigenvalues: Vec<f64>,
    weights: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl CirculantEmbedding {
    /// Embedding of size the smallest power of two `>= 2n`, doubled once if
    /// an eigenvalue falls below `-1e-10`.
    pub fn new(alpha: f64, n: usize) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) || n == 0 {
            return Err(Error::Domain {
                what: "alpha",
                value: alpha,
                domain: "0 < alpha <= 1 and n >= 1",
            });
        }
        let mut size = (2 * n).next_power_of_two();
        let mut planner = FftPlanner::new();
        for attempt in 0..2 {
            let fft = planner.plan_fft_forward(size);
            let half = size / 2;
            let mut buf: Vec<Complex64> = (0..size)
                .map(|j| {
                    let lag = if j <= half { j } else { size - j };
                    Complex64::new(gamma_r(alpha, lag as u64), 0.0)
                })
                .collect();
            fft.process(&mut buf);
            let eigenvalues: Vec<f64> = buf.iter().map(|c| c.re).collect();
            let min = eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
            if min < EMBEDDING_NEGATIVE_TOL {
                if attempt == 0 {
                    size *= 2;
                    continue;
                }
                return Err(Error::EmbeddingFailure {
                    min_eigenvalue: min,
                    size,
                });
            }
            let weights = eigenvalues.iter().map(|&l| (l.max(0.0) / size as f64).sqrt()).collect();
            return Ok(Self {
                alpha,
                n,
                size,
                eigenvalues,
                weights,
                fft,
            });
        }
        unreachable!("embedding loop returns")
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Autocovariance at lags `0..lags` of the sampled sequence, computed
    /// from the (clamped) eigenvalues; no sampling involved.
    pub fn implied_autocovariance(&self, lags: usize) -> Vec<f64> {
        let mut buf: Vec<Complex64> = self
            .eigenvalues
            .iter()
            .map(|&l| Complex64::new(l.max(0.0) / self.size as f64, 0.0))
            .collect();
        // The eigenvalues are real and even, so a forward transform inverts.
        self.fft.process(&mut buf);
        buf.iter().take(lags).map(|c| c.re).collect()
    }

    /// One exact sample of length `n`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut buf: Vec<Complex64> = self
            .weights
            .iter()
            .map(|&w| {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                Complex64::new(w * a, w * b)
            })
            .collect();
        self.fft.process(&mut buf);
        buf.iter().take(self.n).map(|c| c.re).collect()
    }
}

/// Exact stationary sequence with autocovariance `Γ_{|i-j|}` (fractional
/// Gaussian noise with `2H = 1 - α/2`), i.e. the normalized increments of the
/// stationary additive solution at one point.
pub fn simulate_stationary_increments(alpha: f64, n_steps: usize, rng: &RngStream) -> Result<Vec<f64>> {
    Ok(CirculantEmbedding::new(alpha, n_steps)?.sample(&mut rng.rng()))
}

/// Observations `u(iΔ_n)`, `i = 0..=n`, of the stationary additive solution
/// with `σ ≡ 1` at `x = 0`, started from `u(0) = 0`.
pub fn stationary_path(embedding: &CirculantEmbedding, delta_n: f64, rng: &RngStream) -> Result<PathPanel> {
    let tau = tau_n(NoiseParams::new(embedding.alpha, 1)?, delta_n)?;
    let incr = embedding.sample(&mut rng.rng());
    let mut values = Vec::with_capacity(incr.len() + 1);
    let mut u = 0.0;
    values.push(vec![0.0]);
    for z in incr {
        u += tau * z;
        values.push(vec![u]);
    }
    Ok(PathPanel {
        times: (0..values.len()).map(|i| i as f64 * delta_n).collect(),
        points: vec![0.0],
        values,
        meta: PathMeta {
            scheme: "circulant".into(),
            master_seed: rng.master_seed,
            stream_id: rng.stream_id,
            oversampling: 1,
            spatial_modes: 0,
        },
    })
}

/// Spectral-cell mass `∫_{|ξ-k|<1/2} |ξ|^{α-1} dξ` of mode `k >= 0`.
pub fn spectral_cell_mass(alpha: f64, k: usize) -> f64 {
    if k == 0 {
        2.0 * 0.5f64.powf(alpha) / alpha
    } else {
        let k = k as f64;
        ((k + 0.5).powf(alpha) - (k - 0.5).powf(alpha)) / alpha
    }
}

enum Observer {
    Grid(usize),
    Fourier(f64),
}

/// Spectral exponential-Euler scheme on the torus `[0, 1)` in `d = 1`.
///
/// Each micro-step `δ = Δ_n / oversampling` applies the exact heat semigroup
/// `e^{-2π²k²δ}` to every mode and adds `φ_k F[σ(u) ξ]_k`, where `ξ` is the
/// noise increment with independent mode variances `q_k δ`,
/// `φ_k² = (1 - e^{-2λ_k δ}) / (2λ_k δ)` and `λ_k = 2π²k²`. The weight `φ_k`
/// makes the additive case exact in law at every mode.
pub struct SpdeSimulator {
    model: ModelSpec,
    design: SamplingDesign,
    n: usize,
    decay: Vec<f64>,
    noise_scale: Vec<f64>,
    exact_decay: Vec<f64>,
    exact_scale: Vec<f64>,
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
    observers: Vec<Observer>,
}

impl SpdeSimulator {
    pub fn new(model: ModelSpec, design: SamplingDesign) -> Result<Self> {
        model.validate()?;
        design.validate()?;
        if model.noise.dim != 1 {
            return Err(Error::InvalidModel("SPDE simulation is implemented for d = 1 only".into()));
        }
        let n = design.spatial_modes;
        if n < 4 || !n.is_power_of_two() {
            return Err(Error::InvalidDesign(format!("spatial_modes = {n} must be a power of two >= 4")));
        }
        if model.u0.bandwidth() >= n / 2 {
            return Err(Error::InvalidModel("initial condition is not resolved by the grid".into()));
        }
        let delta = design.delta_n / design.oversampling as f64;
        let (decay, noise_scale) = mode_weights(&model, n, delta, design.noise_substeps);
        let (exact_decay, exact_scale) = mode_weights(&model, n, design.delta_n, 1);
        let mut planner = RealFftPlanner::<f64>::new();
        let observers = design
            .points
            .iter()
            .map(|&x| {
                let pos = x.rem_euclid(1.0) * n as f64;
                let j = pos.round();
                if (pos - j).abs() < 1e-9 {
                    Observer::Grid(j as usize % n)
                } else {
                    Observer::Fourier(x)
                }
            })
            .collect();
        Ok(Self {
            r2c: planner.plan_fft_forward(n),
            c2r: planner.plan_fft_inverse(n),
            model,
            design,
            n,
            decay,
            noise_scale,
            exact_decay,
            exact_scale,
            observers,
        })
    }

    pub fn design(&self) -> &SamplingDesign {
        &self.design
    }

    fn initial_spectrum(&self) -> Vec<Complex64> {
        let mut spec = vec![Complex64::new(0.0, 0.0); self.n / 2 + 1];
        match &self.model.u0 {
            crate::model::InitialCondition::Constant { c } => spec[0].re = *c,
            crate::model::InitialCondition::SmoothPeriodic { mean, cosine, sine } => {
                spec[0].re = *mean;
                for (j, a) in cosine.iter().enumerate() {
                    spec[j + 1].re += a / 2.0;
                }
                for (j, b) in sine.iter().enumerate() {
                    spec[j + 1].im -= b / 2.0;
                }
            }
        }
        spec
    }

    /// Mode coefficients of one noise increment, `φ_k` included.
    fn draw_noise<R: Rng + ?Sized>(rng: &mut R, scale: &[f64], substeps: usize, out: &mut [Complex64]) {
        let last = out.len() - 1;
        out.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for _ in 0..substeps {
            for (k, c) in out.iter_mut().enumerate() {
                let s = scale[k];
                if k == 0 || k == last {
                    let a: f64 = rng.sample(StandardNormal);
                    c.re += s * a;
                } else {
                    let a: f64 = rng.sample(StandardNormal);
                    let b: f64 = rng.sample(StandardNormal);
                    c.re += s * a * std::f64::consts::FRAC_1_SQRT_2;
                    c.im += s * b * std::f64::consts::FRAC_1_SQRT_2;
                }
            }
        }
    }

    fn to_physical(&self, spec: &[Complex64], scratch: &mut Vec<Complex64>, out: &mut [f64]) {
        scratch.clear();
        scratch.extend_from_slice(spec);
        let last = scratch.len() - 1;
        scratch[0].im = 0.0;
        scratch[last].im = 0.0;
        self.c2r.process(scratch, out).expect("inverse real FFT with matching lengths");
    }

    fn observe(&self, spec: &[Complex64], field: &[f64]) -> Vec<f64> {
        let last = spec.len() - 1;
        self.observers
            .iter()
            .map(|o| match o {
                Observer::Grid(j) => field[*j],
                Observer::Fourier(x) => {
                    let mut v = spec[0].re + spec[last].re * (PI * self.n as f64 * x).cos();
                    for (k, c) in spec.iter().enumerate().take(last).skip(1) {
                        let (s, co) = (2.0 * PI * k as f64 * x).sin_cos();
                        v += 2.0 * (c.re * co - c.im * s);
                    }
                    v
                }
            })
            .collect()
    }

    fn check_cap(&self, field: &[f64], step: usize) -> Result<()> {
        let cap = self.design.blowup_cap;
        let worst = field.iter().fold(0.0f64, |m, v| if v.is_nan() { f64::INFINITY } else { m.max(v.abs()) });
        if worst > cap {
            return Err(Error::NumericalBlowup {
                step,
                value: worst,
                cap,
            });
        }
        Ok(())
    }

    /// Simulate one path; the final physical field is returned alongside.
    pub fn run_with_field(&self, stream: &RngStream) -> Result<(PathPanel, Vec<f64>)> {
        let mut rng = stream.rng();
        let n = self.n;
        let steps = self.design.steps();
        let mut spec = self.initial_spectrum();
        let mut noise = spec.clone();
        let mut scratch = Vec::with_capacity(spec.len());
        let mut field = vec![0.0; n];
        let mut xi = vec![0.0; n];
        let mut prod_spec = spec.clone();
        let constant = self.model.sigma.as_constant();
        let inv_n = 1.0 / n as f64;

        let mut times = Vec::with_capacity(steps + 1);
        let mut values = Vec::with_capacity(steps + 1);
        self.to_physical(&spec, &mut scratch, &mut field);
        times.push(0.0);
        values.push(self.observe(&spec, &field));

        let mut micro = 0usize;
        for i in 1..=steps {
            if let Some(c) = constant {
                // Exact in law over a whole observation step.
                Self::draw_noise(&mut rng, &self.exact_scale, 1, &mut noise);
                for k in 0..spec.len() {
                    spec[k] = spec[k] * self.exact_decay[k] + noise[k] * c;
                }
                micro += self.design.oversampling;
            } else {
                for _ in 0..self.design.oversampling {
                    Self::draw_noise(&mut rng, &self.noise_scale, self.design.noise_substeps, &mut noise);
                    self.to_physical(&spec, &mut scratch, &mut field);
                    self.check_cap(&field, micro)?;
                    self.to_physical(&noise, &mut scratch, &mut xi);
                    for (x, u) in xi.iter_mut().zip(&field) {
                        *x *= self.model.sigma.eval(*u);
                    }
                    self.r2c
                        .process(&mut xi, &mut prod_spec)
                        .expect("forward real FFT with matching lengths");
                    for k in 0..spec.len() {
                        spec[k] = spec[k] * self.decay[k] + prod_spec[k] * inv_n;
                    }
                    micro += 1;
                }
            }
            self.to_physical(&spec, &mut scratch, &mut field);
            self.check_cap(&field, micro)?;
            times.push(i as f64 * self.design.delta_n);
            values.push(self.observe(&spec, &field));
        }
        let panel = PathPanel {
            times,
            points: self.design.points.clone(),
            values,
            meta: PathMeta {
                scheme: "spectral-exponential-euler".into(),
                master_seed: stream.master_seed,
                stream_id: stream.stream_id,
                oversampling: self.design.oversampling,
                spatial_modes: n,
            },
        };
        Ok((panel, field))
    }

    pub fn run(&self, stream: &RngStream) -> Result<PathPanel> {
        Ok(self.run_with_field(stream)?.0)
    }

    /// One noise increment over a micro-step on the grid, without the
    /// semigroup weight: mode variances `q_k δ`.
    pub fn noise_increment_field(&self, stream: &RngStream) -> Vec<f64> {
        let mut rng = stream.rng();
        let mut spec = vec![Complex64::new(0.0, 0.0); self.n / 2 + 1];
        Self::draw_noise(&mut rng, &self.noise_scale, self.design.noise_substeps, &mut spec);
        let delta = self.design.delta_n / self.design.oversampling as f64;
        for (k, c) in spec.iter_mut().enumerate() {
            if k > 0 {
                let lambda = 2.0 * PI * PI * (k * k) as f64;
                let phi2 = -(-2.0 * lambda * delta).exp_m1() / (2.0 * lambda * delta);
                *c /= phi2.sqrt();
            }
        }
        let mut out = vec![0.0; self.n];
        let mut scratch = Vec::new();
        self.to_physical(&spec, &mut scratch, &mut out);
        out
    }
}

/// Per-mode semigroup decay and noise scale for a step `δ`.
fn mode_weights(model: &ModelSpec, n: usize, delta: f64, substeps: usize) -> (Vec<f64>, Vec<f64>) {
    let half = n / 2 + 1;
    let mut decay = Vec::with_capacity(half);
    let mut scale = Vec::with_capacity(half);
    for k in 0..half {
        let lambda = 2.0 * PI * PI * (k * k) as f64;
        decay.push((-lambda * delta).exp());
        let phi2 = if k == 0 {
            1.0
        } else {
            -(-2.0 * lambda * delta).exp_m1() / (2.0 * lambda * delta)
        };
        let q = if model.noise.white_noise() {
            1.0
        } else {
            spectral_cell_mass(model.noise.alpha, k)
        };
        scale.push((phi2 * q * delta / substeps as f64).sqrt());
    }
    (decay, scale)
}

pub fn simulate_spde(model: &ModelSpec, design: &SamplingDesign, rng: &RngStream) -> Result<PathPanel> {
    SpdeSimulator::new(model.clone(), design.clone())?.run(rng)
}

/// Log-log regression of root-mean-square increments on the lag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub lags: Vec<usize>,
    pub rms: Vec<f64>,
}

fn scaling_fit(lags: &[usize], step: f64, rms_at: impl Fn(usize) -> f64) -> Result<ScalingFit> {
    let mut distinct: Vec<usize> = lags.iter().copied().filter(|&h| h > 0).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::TooFewLags {
            needed: 3,
            got: distinct.len(),
        });
    }
    let rms: Vec<f64> = distinct.iter().map(|&h| rms_at(h)).collect();
    if rms.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::DegeneratePath("zero or non-finite increments at some lag".into()));
    }
    let x: Vec<f64> = distinct.iter().map(|&h| (h as f64 * step).ln()).collect();
    let y: Vec<f64> = rms.iter().map(|v| v.ln()).collect();
    let LineFit {
        slope,
        intercept,
        r_squared,
    } = fit_line(&x, &y);
    Ok(ScalingFit {
        slope,
        intercept,
        r_squared,
        lags: distinct,
        rms,
    })
}

/// Slope of `log E[|u(t+τ) - u(t)|²]^{1/2}` against `log τ` for column `k`,
/// `τ = h Δ_n`, averaging over all overlapping pairs after `skip` rows.
pub fn moment_scaling_check(panel: &PathPanel, column: usize, lags: &[usize], skip: usize) -> Result<ScalingFit> {
    let series: Vec<f64> = panel.values.iter().skip(skip).map(|r| r[column]).collect();
    let step = if panel.times.len() > 1 { panel.times[1] - panel.times[0] } else { 1.0 };
    if let Some(&h) = lags.iter().max() {
        if h >= series.len() {
            return Err(Error::TooFewLags {
                needed: h + 1,
                got: series.len(),
            });
        }
    }
    scaling_fit(lags, step, |h| {
        let m = series.len() - h;
        let s: f64 = (0..m).map(|i| (series[i + h] - series[i]).powi(2)).sum();
        (s / m as f64).sqrt()
    })
}

/// Spatial analogue on a periodic field sampled at spacing `1/N`.
pub fn spatial_scaling_check(field: &[f64], lags: &[usize]) -> Result<ScalingFit> {
    let n = field.len();
    scaling_fit(lags, 1.0 / n as f64, |h| {
        let s: f64 = (0..n).map(|j| (field[(j + h) % n] - field[j]).powi(2)).sum();
        (s / n as f64).sqrt()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::AutocovarianceTable;
    use crate::model::{InitialCondition, Sigma};
    use crate::numerics::{integrate_to_infinity, QuadratureOptions};
    use crate::stats::{mean, std_error};
    use crate::variations::extract_increments;

    fn design(delta: f64, steps: usize, modes: usize, over: usize) -> SamplingDesign {
        let mut d = SamplingDesign::single_point(delta, steps);
        d.spatial_modes = modes;
        d.oversampling = over;
        d
    }

    fn model(alpha: f64, sigma: Sigma, u0: InitialCondition) -> ModelSpec {
        ModelSpec {
            noise: NoiseParams::new(alpha, 1).unwrap(),
            sigma,
            u0,
        }
    }

    #[test]
    fn embedding_matches_toeplitz_analytically() {
        for &alpha in &[0.1, 0.25, 0.5, 0.75, 1.0] {
            let emb = CirculantEmbedding::new(alpha, 256).unwrap();
            assert!(emb.size() >= 512 && emb.size().is_power_of_two());
            let implied = emb.implied_autocovariance(256);
            let table = AutocovarianceTable::new(alpha, 256).unwrap();
            let err = (0..256).map(|r| (implied[r] - table.get(r)).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-12, "alpha {alpha}: {err:e}");
        }
    }

    /// Per-batch sample autocovariances, pooled with their batch SE.
    fn autocov_batches(alpha: f64, batches: u64, len: usize, lags: usize) -> (Vec<f64>, Vec<f64>) {
        let emb = CirculantEmbedding::new(alpha, len).unwrap();
        let per: Vec<Vec<f64>> = (0..batches)
            .map(|b| {
                let x = emb.sample(&mut RngStream::new(99, b).rng());
                (0..=lags)
                    .map(|h| (0..len - h).map(|i| x[i] * x[i + h]).sum::<f64>() / (len - h) as f64)
                    .collect()
            })
            .collect();
        (0..=lags)
            .map(|h| {
                let col: Vec<f64> = per.iter().map(|v| v[h]).collect();
                (mean(&col), std_error(&col))
            })
            .unzip()
    }

    #[test]
    fn sampler_unit_variance_and_alpha_one_correlation() {
        let (m, se) = autocov_batches(1.0, 64, 1 << 14, 1);
        assert!((m[0] - 1.0).abs() < 0.01);
        let target = (2f64.sqrt() - 2.0) / 2.0;
        assert!((m[1] - target).abs() < 3.0 * se[1], "{} vs {target} (se {})", m[1], se[1]);
    }

    #[test]
    fn sampler_autocovariances_alpha_half() {
        let (m, se) = autocov_batches(0.5, 64, 1 << 14, 20);
        for r in 0..=20 {
            let g = gamma_r(0.5, r as u64);
            assert!((m[r] - g).abs() < 4.0 * se[r], "lag {r}: {} vs {g} (se {})", m[r], se[r]);
        }
    }

    #[test]
    fn extract_inverts_cumulative_sum() {
        let n = 512;
        let emb = CirculantEmbedding::new(0.5, n).unwrap();
        let d = SamplingDesign::single_point(1.0 / n as f64, n);
        let stream = RngStream::new(4, 2);
        let panel = stationary_path(&emb, d.delta_n, &stream).unwrap();
        let incr = extract_increments(&panel, &d, 0.5).unwrap();
        let raw = simulate_stationary_increments(0.5, n, &stream).unwrap();
        for (a, b) in incr.column(0).iter().zip(&raw) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn panel_round_trips() {
        let panel = PathPanel {
            times: vec![0.0, 0.25, 0.5],
            points: vec![0.0, 0.125],
            values: vec![vec![1.0, -2.5], vec![1e-300, 3.0], vec![0.1, f64::MAX]],
            meta: PathMeta {
                scheme: "test".into(),
                master_seed: 1,
                stream_id: 2,
                oversampling: 1,
                spatial_modes: 8,
            },
        };
        let mut buf = Vec::new();
        panel.write_csv(&mut buf).unwrap();
        let back = PathPanel::read_csv(buf.as_slice()).unwrap();
        assert_eq!((back.times, back.points, back.values), (panel.times.clone(), panel.points.clone(), panel.values.clone()));
        let mut bin = Vec::new();
        panel.write_binary(&mut bin).unwrap();
        assert_eq!(bin.len(), 8 + 16 + 16 + 3 * 24);
        let back = PathPanel::read_binary(bin.as_slice()).unwrap();
        assert_eq!((back.times, back.points, back.values), (panel.times, panel.points, panel.values));
        assert!(PathPanel::read_binary(&b"garbage!........"[..]).is_err());
    }

    #[test]
    fn zero_noise_keeps_constant_and_evolves_heat() {
        let m = model(0.5, Sigma::Constant { c: 0.0 }, InitialCondition::Constant { c: 1.0 });
        let p = simulate_spde(&m, &design(0.01, 10, 64, 2), &RngStream::new(1, 0)).unwrap();
        assert!(p.values.iter().all(|r| (r[0] - 1.0).abs() < 1e-14));

        let u0 = InitialCondition::SmoothPeriodic {
            mean: 0.5,
            cosine: vec![1.0],
            sine: vec![0.0, 0.3],
        };
        let mut d = design(0.01, 10, 64, 2);
        d.points = vec![0.25, 0.3001];
        let m = model(0.5, Sigma::Linear { sigma0: 0.0 }, u0);
        let p = simulate_spde(&m, &d, &RngStream::new(1, 0)).unwrap();
        for (t, row) in p.times.iter().zip(&p.values) {
            for (x, v) in d.points.iter().zip(row) {
                let e1 = (-2.0 * PI * PI * t).exp();
                let e2 = (-8.0 * PI * PI * t).exp();
                let exact = 0.5 + e1 * (2.0 * PI * x).cos() + 0.3 * e2 * (4.0 * PI * x).sin();
                assert!((v - exact).abs() < 1e-12, "t {t} x {x}: {v} vs {exact}");
            }
        }
    }

    #[test]
    fn deterministic_and_stream_dependent() {
        let m = ModelSpec::parabolic_anderson(0.5, 0.5).unwrap();
        let d = design(1.0 / 64.0, 16, 64, 2);
        let a = simulate_spde(&m, &d, &RngStream::new(8, 3)).unwrap();
        let b = simulate_spde(&m, &d, &RngStream::new(8, 3)).unwrap();
        let c = simulate_spde(&m, &d, &RngStream::new(8, 4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn blowup_is_reported() {
        let m = ModelSpec::parabolic_anderson(0.5, 50.0).unwrap();
        let mut d = design(1.0 / 64.0, 64, 64, 2);
        d.blowup_cap = 5.0;
        assert!(matches!(
            simulate_spde(&m, &d, &RngStream::new(1, 1)),
            Err(Error::NumericalBlowup { .. })
        ));
    }

    #[test]
    fn multiplicative_mean_is_preserved() {
        let m = ModelSpec::parabolic_anderson(0.5, 0.5).unwrap();
        let d = design(1.0 / 64.0, 16, 128, 4);
        let sim = SpdeSimulator::new(m, d).unwrap();
        let finals: Vec<f64> = (0..400)
            .map(|r| *sim.run(&RngStream::new(21, r)).unwrap().values.last().unwrap().first().unwrap())
            .collect();
        assert!((mean(&finals) - 1.0).abs() < 4.0 * std_error(&finals));
    }

    fn smoothed_noise_cov(alpha: f64) -> (f64, f64, f64) {
        let n = 512;
        let m = ModelSpec::additive(alpha, 1.0).unwrap();
        let d = design(1.0, 2, n, 1);
        let sim = SpdeSimulator::new(m, d).unwrap();
        let s = 0.05;
        let bump = |c: f64, x: f64| {
            let z = (x - c + 0.5).rem_euclid(1.0) - 0.5;
            (-z * z / (2.0 * s * s)).exp()
        };
        let w1: Vec<f64> = (0..n).map(|j| bump(0.3, j as f64 / n as f64)).collect();
        let w2: Vec<f64> = (0..n).map(|j| bump(0.4, j as f64 / n as f64)).collect();
        let prods: Vec<f64> = (0..20_000)
            .map(|r| {
                let xi = sim.noise_increment_field(&RngStream::new(77, r));
                let a: f64 = xi.iter().zip(&w1).map(|(x, w)| x * w).sum::<f64>() / n as f64;
                let b: f64 = xi.iter().zip(&w2).map(|(x, w)| x * w).sum::<f64>() / n as f64;
                a * b
            })
            .collect();
        // δ ∫ φ̂₁ conj(φ̂₂) |ξ|^{α-1} dξ with Gaussian transforms, ξ = v^{1/α}.
        let g = |xi: f64| 2.0 * PI * s * s * (-4.0 * PI * PI * s * s * xi * xi).exp() * (2.0 * PI * xi * 0.1).cos();
        let exact = 2.0 / alpha * integrate_to_infinity(|v| g(v.powf(1.0 / alpha)), 0.0, QuadratureOptions::default()).unwrap().value;
        (mean(&prods), std_error(&prods), exact)
    }

    #[test]
    fn noise_field_matches_isometry() {
        for &alpha in &[0.5, 1.0] {
            let (m, se, exact) = smoothed_noise_cov(alpha);
            assert!((m - exact).abs() < 4.0 * se, "alpha {alpha}: {m} vs {exact} (se {se})");
        }
    }

    #[test]
    fn temporal_scaling_on_exact_sampler() {
        let n = 1 << 16;
        for &(alpha, seed) in &[(0.5, 1u64), (1.0, 2)] {
            let emb = CirculantEmbedding::new(alpha, n).unwrap();
            let panel = stationary_path(&emb, 1.0 / n as f64, &RngStream::new(seed, 0)).unwrap();
            let fit = moment_scaling_check(&panel, 0, &[1, 2, 4, 8, 16, 32], 0).unwrap();
            let target = 0.5 - alpha / 4.0;
            assert!((fit.slope - target).abs() < 0.02, "alpha {alpha}: {}", fit.slope);
        }
    }

    #[test]
    fn smooth_path_scales_linearly() {
        let u0 = InitialCondition::SmoothPeriodic {
            mean: 0.0,
            cosine: vec![1.0],
            sine: vec![],
        };
        let m = model(0.5, Sigma::Constant { c: 0.0 }, u0);
        let p = simulate_spde(&m, &design(1.0 / 65536.0, 256, 16, 1), &RngStream::new(0, 0)).unwrap();
        let fit = moment_scaling_check(&p, 0, &[1, 2, 4, 8], 0).unwrap();
        assert!(fit.slope >= 0.99, "{}", fit.slope);
        assert!(matches!(moment_scaling_check(&p, 0, &[1, 2, 2], 0), Err(Error::TooFewLags { .. })));
    }
}
