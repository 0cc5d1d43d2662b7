//! Experiment runners. Each runner produces per-replicate records in
//! parallel (indexed slots, so the result does not depend on the worker
//! count) and a summary computed from those records alone.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use shevar_core::gaussian_limits::{
    limit_covariance, mu_f, rho, Backend, EvaluationFunction, LimitLaw, LimitOptions, McOptions, WPath,
};
use shevar_core::inference::{estimate_sigma0, estimate_sigma0_constant};
use shevar_core::kernels::{
    abs_moment, gamma_partial_sum, gamma_partial_sum_closed_form, gamma_r, gamma_series_sum, pi_mass,
    AutocovarianceTable, NoiseParams,
};
use shevar_core::model::{ModelSpec, Sigma};
use shevar_core::numerics::fit_line;
use shevar_core::rng::RngStream;
use shevar_core::simulate::{stationary_path, CirculantEmbedding, PathPanel, SpdeSimulator};
use shevar_core::stats::{correlation, correlation_std_error, ks_test_normal, mean, std_error, variance};
use shevar_core::variations::{
    clt_statistic, extract_increments, path_w, power_variation, variation_functional, SamplingDesign,
};

use crate::config::{ExperimentConfig, ExperimentKind, Sampler};
use crate::report::{Check, ExperimentReport, Provenance, ReplicateRecord, Summary};
use crate::HarnessError;

/// Builds a path for replicate `i`.
pub enum PathSource {
    Exact { embedding: Arc<CirculantEmbedding>, scale: f64 },
    Spde(Box<SpdeSimulator>),
}

impl PathSource {
    pub fn new(model: &ModelSpec, design: &SamplingDesign, sampler: Sampler) -> Result<Self, HarnessError> {
        let constant = model.sigma.as_constant();
        let exact_ok = constant.is_some() && design.points.len() == 1;
        let use_exact = match sampler {
            Sampler::Auto => exact_ok,
            Sampler::Exact if !exact_ok => {
                return Err(HarnessError::Config(
                    "the exact sampler needs a constant sigma and a single point".into(),
                ))
            }
            Sampler::Exact => true,
            Sampler::Spde => false,
        };
        if use_exact {
            Ok(PathSource::Exact {
                embedding: Arc::new(CirculantEmbedding::new(model.noise.alpha, design.steps())?),
                scale: constant.unwrap_or(1.0),
            })
        } else {
            Ok(PathSource::Spde(Box::new(SpdeSimulator::new(model.clone(), design.clone())?)))
        }
    }

    pub fn path(&self, design: &SamplingDesign, stream: &RngStream) -> Result<PathPanel, shevar_core::Error> {
        match self {
            PathSource::Exact { embedding, scale } => {
                let mut p = stationary_path(embedding, design.delta_n, stream)?;
                for row in &mut p.values {
                    row[0] *= scale;
                }
                p.points = design.points.clone();
                Ok(p)
            }
            PathSource::Spde(sim) => sim.run(stream),
        }
    }
}

/// Runs `job(i)` for `i in 0..count` in parallel; slot `i` holds result `i`.
fn par_indexed<T: Send>(count: usize, job: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    (0..count).into_par_iter().map(job).collect()
}

fn first_error<T>(results: Vec<Result<T, shevar_core::Error>>) -> Result<Vec<T>, HarnessError> {
    let mut out = Vec::with_capacity(results.len());
    for (index, r) in results.into_iter().enumerate() {
        out.push(r.map_err(|source| HarnessError::Replicate { index, source })?);
    }
    Ok(out)
}

/// Simulates `count` replicates with stream ids `0..count`.
pub fn simulate_paths(
    model: &ModelSpec,
    design: &SamplingDesign,
    sampler: Sampler,
    seed: u64,
    count: usize,
) -> Result<Vec<PathPanel>, HarnessError> {
    let source = PathSource::new(model, design, sampler)?;
    first_error(par_indexed(count, |i| source.path(design, &RngStream::new(seed, i as u64))))
}

fn finish(cfg: &ExperimentConfig, records: Vec<ReplicateRecord>) -> Result<ExperimentReport, HarnessError> {
    let summary = summarize(cfg, &records)?;
    Ok(ExperimentReport {
        kind: cfg.kind,
        passed: summary.passed(),
        summary,
        provenance: Provenance {
            config_hash: cfg.hash()?,
            config: cfg.to_toml()?,
            seed: cfg.seed,
            replicates: cfg.replicates,
            core_version: shevar_core::VERSION.into(),
            harness_version: env!("CARGO_PKG_VERSION").into(),
        },
        records,
    })
}

pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    match cfg.kind {
        ExperimentKind::Lln => run_lln(cfg),
        ExperimentKind::Clt => run_clt(cfg),
        ExperimentKind::Estimate => run_estimation(cfg),
        ExperimentKind::Identities => run_identities(cfg),
        ExperimentKind::Scaling => run_scaling(cfg),
    }
}

/// Recomputes the summary of an experiment from its records.
pub fn summarize(cfg: &ExperimentConfig, records: &[ReplicateRecord]) -> Result<Summary, HarnessError> {
    Ok(match cfg.kind {
        ExperimentKind::Lln => summarize_lln(cfg, records),
        ExperimentKind::Clt => summarize_clt(cfg, records),
        ExperimentKind::Estimate => summarize_estimation(cfg, records),
        ExperimentKind::Identities => summarize_identities(records),
        ExperimentKind::Scaling => summarize_scaling(cfg, records),
    })
}

fn with_horizon(design: &SamplingDesign, n: usize) -> SamplingDesign {
    SamplingDesign {
        delta_n: design.horizon / n as f64,
        ..design.clone()
    }
}

// ---------------------------------------------------------------- CLT

fn clt_function(cfg: &ExperimentConfig) -> Result<EvaluationFunction, HarnessError> {
    let f = match &cfg.clt.function {
        Some(f) => f.clone(),
        None => EvaluationFunction::abs_power(cfg.clt.p)?,
    };
    if f.points != cfg.design.points.len() || f.lags != cfg.design.lags {
        return Err(HarnessError::Config(format!(
            "function expects K = {}, L = {} but the design has K = {}, L = {}",
            f.points,
            f.lags,
            cfg.design.points.len(),
            cfg.design.lags
        )));
    }
    if cfg.clt.component >= f.outputs() {
        return Err(HarnessError::Config("clt.component exceeds the number of outputs".into()));
    }
    Ok(f)
}

pub fn run_clt(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    check_clt_scope(&cfg.model)?;
    let paths = simulate_paths(&cfg.model, &cfg.design, cfg.clt.sampler, cfg.seed, cfg.replicates)?;
    finish(cfg, clt_records(cfg, &paths)?)
}

pub fn check_clt_scope(model: &ModelSpec) -> Result<(), HarnessError> {
    if !model.noise.clt_in_scope() {
        return Err(HarnessError::OutOfScope(format!(
            "alpha = {}: the central limit theorem is only valid for 0 < alpha < 1; \
             at alpha = 1 (space-time white noise) the statistic has an asymptotic bias",
            model.noise.alpha
        )));
    }
    Ok(())
}

/// Studentized statistic at `T` plus the split at `T/2`, one record per path.
pub fn clt_records(cfg: &ExperimentConfig, paths: &[PathPanel]) -> Result<Vec<ReplicateRecord>, HarnessError> {
    let f = clt_function(cfg)?;
    let design = &cfg.design;
    let alpha = cfg.model.noise.alpha;
    let steps = design.steps();
    let t_grid = [(steps / 2) as f64 * design.delta_n, steps as f64 * design.delta_n];
    let m = cfg.clt.component;
    let shared: Option<LimitLaw> = match cfg.model.sigma.as_constant() {
        Some(c) => Some(limit_covariance(
            alpha,
            &f,
            &WPath::constant(vec![c * c; f.points]),
            &t_grid,
            &cfg.limits,
        )?),
        None => None,
    };
    let results = par_indexed(paths.len(), |i| -> Result<ReplicateRecord, shevar_core::Error> {
        let panel = &paths[i];
        let incr = extract_increments(panel, design, alpha)?;
        let vn = variation_functional(&f, &incr, design, &t_grid)?;
        let own;
        let law = match &shared {
            Some(l) => l,
            None => {
                own = limit_covariance(alpha, &f, &path_w(panel, &cfg.model.sigma)?, &t_grid, &cfg.limits)?;
                &own
            }
        };
        let stat = clt_statistic(&vn, &law.v_path, design.delta_n)?;
        let c = law.c_path[1][m][m];
        Ok(ReplicateRecord::new(i, "clt")
            .with("z", stat[1][m] / c.sqrt())
            .with("stat", stat[1][m])
            .with("c", c)
            .with("vn", vn[1][m])
            .with("v", law.v_path[1][m])
            .with("s_half", stat[0][m])
            .with("s_incr", stat[1][m] - stat[0][m]))
    });
    first_error(results)
}

fn column(records: &[ReplicateRecord], name: &str) -> Vec<f64> {
    records.iter().filter(|r| r.error.is_none()).filter_map(|r| r.get(name)).collect()
}

fn summarize_clt(cfg: &ExperimentConfig, records: &[ReplicateRecord]) -> Summary {
    let tol = &cfg.tolerances;
    let z = column(records, "z");
    let stat = column(records, "stat");
    let c = column(records, "c");
    let mut s = Summary::default();
    let n = z.len();
    let (mz, sez) = (mean(&z), std_error(&z));
    let ks = ks_test_normal(&z);
    let ratio = variance(&stat) / mean(&c);
    let corr = correlation(&column(records, "s_half"), &column(records, "s_incr"));
    let corr_se = correlation_std_error(n);
    s.metric("replicates", n as f64);
    s.metric("mean_z", mz);
    s.metric("se_mean_z", sez);
    s.metric("var_z", variance(&z));
    s.metric("ks_statistic", ks.statistic);
    s.metric("ks_p_value", ks.p_value);
    s.metric("variance_ratio", ratio);
    s.metric("mean_c", mean(&c));
    s.metric("increment_correlation", corr);
    s.metric("increment_correlation_se", corr_se);
    if let Some(k) = tol.mean_se {
        s.checks.push(Check::new("mean_z", mz, format!("|mean| <= {k} SE ({:.4})", k * sez), mz.abs() <= k * sez));
    }
    if let Some(p) = tol.ks_p_min {
        s.checks.push(Check::new("ks_p_value", ks.p_value, format!("p > {p}"), ks.p_value > p));
    }
    if let Some(b) = tol.variance_ratio {
        s.checks.push(Check::new(
            "variance_ratio",
            ratio,
            format!("|ratio - 1| <= {b}"),
            (ratio - 1.0).abs() <= b,
        ));
    }
    if let Some(k) = tol.independence_se {
        s.checks.push(Check::new(
            "increment_correlation",
            corr,
            format!("|corr| <= {k} SE ({:.4})", k * corr_se),
            corr.abs() <= k * corr_se,
        ));
    }
    s
}

// ---------------------------------------------------------------- LLN

fn target_variation(p: f64, panel: &PathPanel, sigma: &Sigma, alpha: f64, t: f64, limits: &LimitOptions) -> Result<f64, shevar_core::Error> {
    match sigma.as_constant() {
        Some(c) => Ok(abs_moment(p)? * c.abs().powf(p) * t),
        None => {
            let f = EvaluationFunction::abs_power(p)?;
            let law = shevar_core::gaussian_limits::limit_lln(alpha, &f, &path_w(panel, sigma)?, &[t], limits)?;
            Ok(law[0][0])
        }
    }
}

pub fn run_lln(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    let alpha = cfg.model.noise.alpha;
    let mut records = Vec::new();
    for &e in &cfg.lln.exponents {
        let n = 1usize << e;
        let design = with_horizon(&cfg.design, n);
        let t = n as f64 * design.delta_n;
        let source = PathSource::new(&cfg.model, &design, cfg.lln.sampler)?;
        let base = records.len();
        let results = par_indexed(cfg.replicates, |i| -> Result<ReplicateRecord, shevar_core::Error> {
            let panel = source.path(&design, &RngStream::new(cfg.seed, i as u64))?;
            let series = panel.column(0);
            let mut rec = ReplicateRecord::new(base + i, format!("n={n}")).with("n", n as f64);
            for &p in &cfg.lln.powers {
                let vn = power_variation(p, &series, &design, alpha, &[t])?[0];
                let v = target_variation(p, &panel, &cfg.model.sigma, alpha, t, &cfg.limits)?;
                rec = rec.with(&format!("err_p{p}"), (vn - v).abs()).with(&format!("vn_p{p}"), vn);
            }
            Ok(rec)
        });
        records.extend(first_error(results)?);
    }
    finish(cfg, records)
}

fn group_by_n(records: &[ReplicateRecord]) -> BTreeMap<u64, Vec<&ReplicateRecord>> {
    let mut groups: BTreeMap<u64, Vec<&ReplicateRecord>> = BTreeMap::new();
    for r in records {
        if let Some(n) = r.get("n") {
            groups.entry(n as u64).or_default().push(r);
        }
    }
    groups
}

fn summarize_lln(cfg: &ExperimentConfig, records: &[ReplicateRecord]) -> Summary {
    let tol = &cfg.tolerances;
    let groups = group_by_n(records);
    let mut s = Summary::default();
    for &p in &cfg.lln.powers {
        let key = format!("err_p{p}");
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for (n, recs) in &groups {
            let errs: Vec<f64> = recs.iter().filter_map(|r| r.get(&key)).collect();
            let m = mean(&errs);
            s.metric(format!("mean_abs_error_p{p}_n{n}"), m);
            xs.push((*n as f64).ln());
            ys.push(m.ln());
        }
        if xs.len() >= 2 {
            let slope = fit_line(&xs, &ys).slope;
            s.metric(format!("slope_p{p}"), slope);
            if let Some(b) = tol.lln_slope {
                s.checks.push(Check::new(
                    format!("lln_slope_p{p}"),
                    slope,
                    format!("|slope + 0.5| <= {b}"),
                    (slope + 0.5).abs() <= b,
                ));
            }
        }
        if let (Some(b), Some(&last)) = (tol.lln_final_error, ys.last()) {
            let e = last.exp();
            s.checks.push(Check::new(format!("lln_final_error_p{p}"), e, format!("<= {b}"), e <= b));
        }
    }
    s
}

// ---------------------------------------------------------- estimation

/// Estimator records for already simulated paths at `n` steps.
pub fn estimation_records(
    cfg: &ExperimentConfig,
    design: &SamplingDesign,
    paths: &[PathPanel],
    base_index: usize,
) -> Result<Vec<ReplicateRecord>, HarnessError> {
    let alpha = cfg.model.noise.alpha;
    let est = &cfg.estimate;
    let (truth, constant) = match cfg.model.sigma {
        Sigma::Linear { sigma0 } => (sigma0.abs(), false),
        Sigma::Constant { c } => (c.abs(), true),
        _ => {
            return Err(HarnessError::Config(
                "estimation needs a linear (parabolic Anderson) or constant sigma".into(),
            ))
        }
    };
    let n = design.steps();
    Ok(par_indexed(paths.len(), |i| {
        let series = paths[i].column(0);
        let mut rec = ReplicateRecord::new(base_index + i, format!("n={n}")).with("n", n as f64);
        let report = if constant {
            estimate_sigma0_constant(est.p, &series, design, alpha, est.level, &cfg.limits)
        } else {
            estimate_sigma0(est.p, &series, design, alpha, est.level, &cfg.limits)
        };
        match report {
            Ok(r) => {
                rec = rec
                    .with("truth", truth)
                    .with("estimate", r.estimate)
                    .with("se", r.se)
                    .with("ci_low", r.ci_low)
                    .with("ci_high", r.ci_high)
                    .with("covers", if r.covers(truth) { 1.0 } else { 0.0 });
            }
            Err(e) => rec.error = Some(e.to_string()),
        }
        rec
    }))
}

pub fn run_estimation(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    let ladder: Vec<usize> = if cfg.estimate.exponents.is_empty() {
        vec![cfg.design.steps()]
    } else {
        cfg.estimate.exponents.iter().map(|&e| 1usize << e).collect()
    };
    let mut records = Vec::new();
    for n in ladder {
        let design = with_horizon(&cfg.design, n);
        let paths = simulate_paths(&cfg.model, &design, cfg.estimate.sampler, cfg.seed, cfg.replicates)?;
        let base = records.len();
        records.extend(estimation_records(cfg, &design, &paths, base)?);
    }
    finish(cfg, records)
}

fn summarize_estimation(cfg: &ExperimentConfig, records: &[ReplicateRecord]) -> Summary {
    let tol = &cfg.tolerances;
    let mut s = Summary::default();
    let groups = group_by_n(records);
    let mut rmses = Vec::new();
    let mut last = None;
    for (n, recs) in &groups {
        let ok: Vec<&ReplicateRecord> = recs.iter().copied().filter(|r| r.error.is_none()).collect();
        let failures = recs.len() - ok.len();
        s.metric(format!("failures_n{n}"), failures as f64);
        if ok.is_empty() {
            continue;
        }
        let truth = ok[0].get("truth").unwrap_or(f64::NAN);
        let est: Vec<f64> = ok.iter().filter_map(|r| r.get("estimate")).collect();
        let covers: Vec<f64> = ok.iter().filter_map(|r| r.get("covers")).collect();
        let m = mean(&est);
        let rmse = (est.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / est.len() as f64).sqrt();
        let coverage = mean(&covers);
        s.metric(format!("mean_estimate_n{n}"), m);
        s.metric(format!("se_mean_n{n}"), std_error(&est));
        s.metric(format!("bias_n{n}"), m - truth);
        s.metric(format!("relative_bias_n{n}"), (m - truth) / truth);
        s.metric(format!("rmse_n{n}"), rmse);
        s.metric(format!("coverage_n{n}"), coverage);
        rmses.push(rmse);
        last = Some((m, truth, coverage));
    }
    if let Some((m, truth, coverage)) = last {
        if let Some(b) = tol.relative_bias {
            let rel = (m - truth) / truth;
            s.checks.push(Check::new("relative_bias", rel, format!("|mean / truth - 1| <= {b}"), rel.abs() <= b));
        }
        if let Some([lo, hi]) = tol.coverage {
            s.checks.push(Check::new(
                "coverage",
                coverage,
                format!("in [{lo}, {hi}]"),
                (lo..=hi).contains(&coverage),
            ));
        }
    }
    if tol.rmse_monotone && rmses.len() >= 2 {
        let ok = rmses.windows(2).all(|w| w[1] < w[0]);
        s.checks.push(Check::new("rmse_monotone", rmses.len() as f64, "RMSE decreases along the ladder", ok));
    }
    if groups.values().all(|g| g.iter().all(|r| r.error.is_some())) {
        s.checks.push(Check::new("estimates", 0.0, "at least one replicate succeeds", false));
    }
    s
}

// ---------------------------------------------------------- identities

/// Maximum that propagates NaN.
fn worst(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

fn identity(index: usize, name: &str, value: f64, tolerance: f64) -> ReplicateRecord {
    ReplicateRecord::new(index, name).with("value", value).with("tolerance", tolerance)
}

pub fn run_identities(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    let tol = &cfg.tolerances;
    let id = &cfg.identities;
    let mut records = Vec::new();
    let mut push = |name: &str, value: f64, t: Option<f64>| {
        if let Some(t) = t {
            records.push(identity(records.len(), name, value, t));
        }
    };

    let pi_errors = first_error(par_indexed(id.alphas.len(), |j| {
        let a = id.alphas[j];
        (0..=id.r_max).try_fold(0.0f64, |m, r| Ok(m.max((pi_mass(a, r)? - gamma_r(a, r)).abs())))
    }))?;
    push("pi_mass_vs_gamma", pi_errors.iter().copied().fold(0.0, worst), tol.pi_mass);

    let partial: Vec<f64> = par_indexed(id.alphas.len(), |j| {
        let a = id.alphas[j];
        let closed = gamma_partial_sum_closed_form(a, id.partial_sum_r);
        ((closed - gamma_partial_sum(a, id.partial_sum_r)) / closed).abs()
    });
    push("partial_sum_relative", partial.iter().copied().fold(0.0, worst), tol.partial_sum);

    let series = first_error(par_indexed(id.alphas.len(), |j| {
        gamma_series_sum(id.alphas[j], id.partial_sum_r).map(|s| (s - 0.5).abs())
    }))?;
    push("series_sum_half", series.iter().copied().fold(0.0, worst), tol.series_sum);

    let psd = first_error(par_indexed(id.alphas.len(), |j| {
        let t = AutocovarianceTable::new(id.alphas[j], id.toeplitz_size as u64)?;
        Ok(t.toeplitz(id.toeplitz_size).symmetric_eigen().eigenvalues.min())
    }))?;
    let min_eig = psd.iter().copied().fold(f64::INFINITY, f64::min);
    push("toeplitz_min_eigenvalue", min_eig, Some(0.0));

    let emb = first_error(par_indexed(id.alphas.len(), |j| {
        let a = id.alphas[j];
        let e = CirculantEmbedding::new(a, id.toeplitz_size)?;
        let implied = e.implied_autocovariance(id.toeplitz_size);
        Ok((0..id.toeplitz_size).map(|r| (implied[r] - gamma_r(a, r as u64)).abs()).fold(0.0, worst))
    }))?;
    push("embedding_vs_toeplitz", emb.iter().copied().fold(0.0, worst), tol.embedding);

    let alpha = cfg.model.noise.alpha;
    push("sampler_autocovariance_se", sampler_autocov_z(alpha, id.sampler_draws, id.sampler_lags, cfg.seed)?, tol.mc_se);

    let quad = EvaluationFunction::abs_power(2.0)?;
    let mc = LimitOptions {
        backend: Backend::MonteCarlo,
        mc: McOptions {
            pairs: id.mc_pairs,
            seed: cfg.seed,
            ..McOptions::default()
        },
        ..cfg.limits
    };
    let exact = LimitOptions {
        backend: Backend::Auto,
        ..cfg.limits
    };
    let w = 1.0;
    let rho_z = first_error(par_indexed(id.rho_lags + 1, |r| {
        let e = rho(alpha, &quad, 0, 0, r, &[w], &exact)?;
        let g = gamma_r(alpha, r as u64);
        let closed = 2.0 * g * g * w * w;
        let m = rho(alpha, &quad, 0, 0, r, &[w], &mc)?;
        Ok(((e.value - closed).abs(), (m.value - closed).abs() / m.std_error))
    }))?;
    push("rho_quadratic_closed_form", rho_z.iter().map(|x| x.0).fold(0.0, worst), tol.closed_form);
    push("rho_quadratic_mc_se", rho_z.iter().map(|x| x.1).fold(0.0, worst), tol.mc_se);

    let w: f64 = 1.7;
    let mu_z = first_error(par_indexed(id.powers.len(), |j| {
        let p = id.powers[j];
        let f = EvaluationFunction::abs_power(p)?;
        let closed = abs_moment(p)? * w.powf(p / 2.0);
        let m = mu_f(alpha, &f, &[w], &mc)?[0];
        Ok((m.value - closed).abs() / m.std_error)
    }))?;
    push("mu_abs_power_mc_se", mu_z.iter().copied().fold(0.0, worst), tol.mc_se);

    finish(cfg, records)
}

/// Largest `|sample autocovariance - Γ_r| / SE` over lags `0..=lags`, from
/// batches of exact samples.
pub fn sampler_autocov_z(alpha: f64, draws: usize, lags: usize, seed: u64) -> Result<f64, HarnessError> {
    let len = 1usize << 14;
    let batches = (draws / len).max(8);
    let emb = CirculantEmbedding::new(alpha, len)?;
    let per: Vec<Vec<f64>> = par_indexed(batches, |b| {
        let x = emb.sample(&mut RngStream::new(seed, b as u64).rng());
        (0..=lags)
            .map(|h| (0..len - h).map(|i| x[i] * x[i + h]).sum::<f64>() / (len - h) as f64)
            .collect()
    });
    Ok((0..=lags)
        .map(|h| {
            let col: Vec<f64> = per.iter().map(|v| v[h]).collect();
            (mean(&col) - gamma_r(alpha, h as u64)).abs() / std_error(&col)
        })
        .fold(0.0, worst))
}

fn summarize_identities(records: &[ReplicateRecord]) -> Summary {
    let mut s = Summary::default();
    for r in records {
        let (v, t) = (r.get("value").unwrap_or(f64::NAN), r.get("tolerance").unwrap_or(f64::NAN));
        s.metric(r.group.clone(), v);
        let check = if r.group == "toeplitz_min_eigenvalue" {
            Check::new(&r.group, v, format!(">= -1e-12 (min eigenvalue, target {t})"), v >= -1e-12)
        } else {
            Check::new(&r.group, v, format!("<= {t:e}"), v <= t)
        };
        s.checks.push(check);
    }
    s
}

// ------------------------------------------------------------- scaling

fn temporal_rms(series: &[f64], lags: &[usize]) -> Vec<f64> {
    lags.iter()
        .map(|&h| {
            let m = series.len() - h;
            ((0..m).map(|i| (series[i + h] - series[i]).powi(2)).sum::<f64>() / m as f64).sqrt()
        })
        .collect()
}

fn spatial_rms(field: &[f64], lags: &[usize]) -> Vec<f64> {
    let n = field.len();
    lags.iter()
        .map(|&h| ((0..n).map(|j| (field[(j + h) % n] - field[j]).powi(2)).sum::<f64>() / n as f64).sqrt())
        .collect()
}

pub fn run_scaling(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    let sc = &cfg.scaling;
    if sc.lags.len() < 3 || (sc.spde && sc.spatial_lags.len() < 3) {
        return Err(HarnessError::Core(shevar_core::Error::TooFewLags {
            needed: 3,
            got: sc.lags.len().min(sc.spatial_lags.len()),
        }));
    }
    let design = &cfg.design;
    let mut records = Vec::new();
    for &alpha in &sc.alphas {
        let emb = CirculantEmbedding::new(alpha, design.steps())?;
        let base = records.len();
        let exact = first_error(par_indexed(cfg.replicates, |i| {
            let p = stationary_path(&emb, design.delta_n, &RngStream::new(cfg.seed, i as u64))?;
            let mut rec = ReplicateRecord::new(base + i, format!("exact alpha={alpha}")).with("alpha", alpha);
            for (h, v) in sc.lags.iter().zip(temporal_rms(&p.column(0), &sc.lags)) {
                rec = rec.with(&format!("rms_{h}"), v);
            }
            Ok(rec)
        }))?;
        records.extend(exact);
        if sc.spde {
            let model = ModelSpec {
                noise: NoiseParams::new(alpha, cfg.model.noise.dim)?,
                ..cfg.model.clone()
            };
            let sim = SpdeSimulator::new(model, design.clone())?;
            let base = records.len();
            let spde = first_error(par_indexed(cfg.replicates, |i| {
                let (p, field) = sim.run_with_field(&RngStream::new(cfg.seed, (1 << 32) + i as u64))?;
                let series: Vec<f64> = p.column(0).into_iter().skip(design.burn_in).collect();
                let mut t = ReplicateRecord::new(base + 2 * i, format!("spde-time alpha={alpha}")).with("alpha", alpha);
                for (h, v) in sc.lags.iter().zip(temporal_rms(&series, &sc.lags)) {
                    t = t.with(&format!("rms_{h}"), v);
                }
                let mut x = ReplicateRecord::new(base + 2 * i + 1, format!("spde-space alpha={alpha}")).with("alpha", alpha);
                for (h, v) in sc.spatial_lags.iter().zip(spatial_rms(&field, &sc.spatial_lags)) {
                    x = x.with(&format!("rms_{h}"), v);
                }
                Ok(vec![t, x])
            }))?;
            records.extend(spde.into_iter().flatten());
        }
    }
    finish(cfg, records)
}

/// Slope of log RMS against log lag, pooling mean squares over records.
fn pooled_slope(records: &[&ReplicateRecord], lags: &[usize]) -> f64 {
    let xs: Vec<f64> = lags.iter().map(|&h| (h as f64).ln()).collect();
    let ys: Vec<f64> = lags
        .iter()
        .map(|h| {
            let sq: Vec<f64> = records.iter().filter_map(|r| r.get(&format!("rms_{h}"))).map(|v| v * v).collect();
            0.5 * mean(&sq).ln()
        })
        .collect();
    fit_line(&xs, &ys).slope
}

fn summarize_scaling(cfg: &ExperimentConfig, records: &[ReplicateRecord]) -> Summary {
    let tol = &cfg.tolerances;
    let sc = &cfg.scaling;
    let mut s = Summary::default();
    let mut groups: BTreeMap<&str, Vec<&ReplicateRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.group.as_str()).or_default().push(r);
    }
    for (name, recs) in groups {
        let alpha = recs[0].get("alpha").unwrap_or(f64::NAN);
        let (lags, target, bound) = if name.starts_with("spde-space") {
            (&sc.spatial_lags, 1.0 - alpha / 2.0, tol.scaling_spatial)
        } else if name.starts_with("spde-time") {
            (&sc.lags, 0.5 - alpha / 4.0, tol.scaling_spde)
        } else {
            (&sc.lags, 0.5 - alpha / 4.0, tol.scaling_exact)
        };
        let slope = pooled_slope(&recs, lags);
        s.metric(format!("slope {name}"), slope);
        s.metric(format!("target {name}"), target);
        if let Some(b) = bound {
            s.checks.push(Check::new(
                format!("slope {name}"),
                slope,
                format!("|slope - {target}| <= {b}"),
                (slope - target).abs() <= b,
            ));
        }
    }
    s
}
