//! Experiment configuration, read from TOML. Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use shevar_core::gaussian_limits::{EvaluationFunction, LimitOptions};
use shevar_core::model::ModelSpec;
use shevar_core::variations::SamplingDesign;

use crate::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Lln,
    Clt,
    Estimate,
    Identities,
    Scaling,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Lln => "lln",
            ExperimentKind::Clt => "clt",
            ExperimentKind::Estimate => "estimate",
            ExperimentKind::Identities => "identities",
            ExperimentKind::Scaling => "scaling",
        }
    }
}

/// Path generator for Monte Carlo experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Exact stationary sampler when `σ` is constant and `K = 1`, the SPDE
    /// scheme otherwise.
    #[default]
    Auto,
    Exact,
    Spde,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Also dump every simulated path as CSV under `paths/`.
    pub write_paths: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            write_paths: false,
        }
    }
}

/// Pass/fail thresholds; `None` disables a check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Mean of the studentized statistic within this many standard errors.
    pub mean_se: Option<f64>,
    pub ks_p_min: Option<f64>,
    /// `|var / 𝒞 - 1|` bound.
    pub variance_ratio: Option<f64>,
    /// Correlation of statistic increments within this many standard errors.
    pub independence_se: Option<f64>,
    /// `|slope + 1/2|` bound for the LLN error decay.
    pub lln_slope: Option<f64>,
    /// Bound on `E|V^n - V|` at the finest `n`.
    pub lln_final_error: Option<f64>,
    pub relative_bias: Option<f64>,
    pub coverage: Option<[f64; 2]>,
    /// Require RMSE to shrink along the estimation ladder.
    pub rmse_monotone: bool,
    pub scaling_exact: Option<f64>,
    pub scaling_spde: Option<f64>,
    pub scaling_spatial: Option<f64>,
    pub pi_mass: Option<f64>,
    pub partial_sum: Option<f64>,
    pub series_sum: Option<f64>,
    pub embedding: Option<f64>,
    /// Exact-backend `ρ` against its closed form.
    pub closed_form: Option<f64>,
    /// Monte Carlo agreement in standard errors (identities).
    pub mc_se: Option<f64>,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            mean_se: Some(4.0),
            ks_p_min: Some(0.01),
            variance_ratio: None,
            independence_se: None,
            lln_slope: Some(0.1),
            lln_final_error: None,
            relative_bias: None,
            coverage: None,
            rmse_monotone: false,
            scaling_exact: Some(0.02),
            scaling_spde: Some(0.05),
            scaling_spatial: Some(0.05),
            pi_mass: Some(1e-6),
            partial_sum: Some(1e-12),
            series_sum: Some(1e-5),
            embedding: Some(1e-12),
            closed_form: Some(1e-12),
            mc_se: Some(4.0),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CltConfig {
    pub sampler: Sampler,
    /// Power `p` of `f = |z|^p`, used when `function` is absent.
    pub p: f64,
    pub function: Option<EvaluationFunction>,
    /// Output component studentized.
    pub component: usize,
}

impl Default for CltConfig {
    fn default() -> Self {
        Self {
            sampler: Sampler::Auto,
            p: 2.0,
            function: None,
            component: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlnConfig {
    pub sampler: Sampler,
    /// `n = 2^e` for each exponent, with `Δ_n = T / n`.
    pub exponents: Vec<u32>,
    pub powers: Vec<f64>,
}

impl Default for LlnConfig {
    fn default() -> Self {
        Self {
            sampler: Sampler::Auto,
            exponents: (10..=16).collect(),
            powers: vec![2.0, 4.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateConfig {
    pub sampler: Sampler,
    pub p: f64,
    pub level: f64,
    /// Optional ladder `n = 2^e`; empty means the design's own `n`.
    pub exponents: Vec<u32>,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            sampler: Sampler::Auto,
            p: 2.0,
            level: 0.95,
            exponents: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingConfig {
    pub alphas: Vec<f64>,
    pub lags: Vec<usize>,
    /// Also run the SPDE scheme (temporal and spatial slopes).
    pub spde: bool,
    pub spatial_lags: Vec<usize>,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            alphas: vec![0.5, 0.9],
            lags: vec![1, 2, 4, 8, 16, 32],
            spde: true,
            spatial_lags: vec![4, 8, 16, 32],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentitiesConfig {
    pub alphas: Vec<f64>,
    pub r_max: u64,
    pub partial_sum_r: u64,
    pub toeplitz_size: usize,
    pub rho_lags: usize,
    pub powers: Vec<f64>,
    pub mc_pairs: usize,
    /// Exact-sampler draws for the empirical autocovariance check.
    pub sampler_draws: usize,
    pub sampler_lags: usize,
}

impl Default for IdentitiesConfig {
    fn default() -> Self {
        Self {
            alphas: vec![0.1, 0.25, 0.5, 0.75, 0.9],
            r_max: 50,
            partial_sum_r: 1_000_000,
            toeplitz_size: 256,
            rho_lags: 10,
            powers: vec![1.0, 2.0, 3.0, 4.0],
            mc_pairs: 200_000,
            sampler_draws: 1 << 20,
            sampler_lags: 20,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub replicates: usize,
    pub model: ModelSpec,
    pub design: SamplingDesign,
    #[serde(default)]
    pub limits: LimitOptions,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub clt: CltConfig,
    #[serde(default)]
    pub lln: LlnConfig,
    #[serde(default)]
    pub estimate: EstimateConfig,
    #[serde(default)]
    pub scaling: ScalingConfig,
    #[serde(default)]
    pub identities: IdentitiesConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.replicates == 0 {
            return Err(HarnessError::Config("replicates must be at least 1".into()));
        }
        self.model.validate()?;
        self.design.validate()?;
        if let Some(f) = &self.clt.function {
            f.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> Result<String, HarnessError> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"
kind = "clt"
seed = 7
replicates = 10

[model]
noise = { alpha = 0.5, dim = 1 }
sigma = { kind = "linear", sigma0 = 0.5 }
u0 = { kind = "constant", c = 1.0 }

[design]
delta_n = 0.000244140625
horizon = 1.0
points = [0.0]
lags = 1
spatial_modes = 1024

[tolerances]
variance_ratio = 0.15
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = ExperimentConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(cfg.kind, ExperimentKind::Clt);
        assert_eq!(cfg.design.oversampling, 16);
        assert_eq!(cfg.tolerances.variance_ratio, Some(0.15));
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back.to_toml().unwrap(), text);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        assert_eq!(cfg.hash().unwrap().len(), 64);
    }

    #[test]
    fn unknown_keys_fail() {
        for bad in [
            SAMPLE.replace("seed = 7", "seed = 7\nsede = 8"),
            SAMPLE.replace("lags = 1", "lags = 1\nlag = 2"),
            SAMPLE.replace("sigma0 = 0.5", "sigma0 = 0.5, sigma1 = 1.0"),
            SAMPLE.replace("dim = 1", "dim = 1, beta = 2"),
            format!("{SAMPLE}\n[clt]\npower = 2.0\n"),
        ] {
            assert!(ExperimentConfig::from_toml(&bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn invalid_values_fail() {
        assert!(ExperimentConfig::from_toml(&SAMPLE.replace("replicates = 10", "replicates = 0")).is_err());
        assert!(ExperimentConfig::from_toml(&SAMPLE.replace("horizon = 1.0", "horizon = 0.0001")).is_err());
    }
}
