//! The equation `∂_t u = ½ Δu + σ(u) Ẇ`, `u(0) = u_0`, with Riesz-kernel noise.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::NoiseParams;

#[derive(Clone)]
pub struct CustomSigma(pub Arc<dyn Fn(f64) -> f64 + Send + Sync>);

impl fmt::Debug for CustomSigma {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CustomSigma")
    }
}

/// Diffusion coefficient `σ`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sigma {
    /// `σ(x) = c` (additive noise).
    Constant { c: f64 },
    /// `σ(x) = σ₀ x` (parabolic Anderson model).
    Linear { sigma0: f64 },
    /// `σ(x) = a + b sin(x)`.
    AffinePlus { a: f64, b: f64 },
    /// User function; `lipschitz` is its declared Lipschitz constant.
    #[serde(skip)]
    Custom { func: CustomSigma, lipschitz: f64 },
}

impl Sigma {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Sigma::Constant { c } => *c,
            Sigma::Linear { sigma0 } => sigma0 * x,
            Sigma::AffinePlus { a, b } => a + b * x.sin(),
            Sigma::Custom { func, .. } => (func.0)(x),
        }
    }

    /// The constant value if `σ` does not depend on `u`.
    pub fn as_constant(&self) -> Option<f64> {
        match self {
            Sigma::Constant { c } => Some(*c),
            Sigma::Linear { sigma0 } if *sigma0 == 0.0 => Some(0.0),
            Sigma::AffinePlus { a, b } if *b == 0.0 => Some(*a),
            _ => None,
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match self {
            Sigma::Constant { .. } => 0.0,
            Sigma::Linear { sigma0 } => sigma0.abs(),
            Sigma::AffinePlus { b, .. } => b.abs(),
            Sigma::Custom { lipschitz, .. } => *lipschitz,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Sigma::Constant { c } => c.is_finite(),
            Sigma::Linear { sigma0 } => sigma0.is_finite(),
            Sigma::AffinePlus { a, b } => a.is_finite() && b.is_finite(),
            Sigma::Custom { lipschitz, .. } => lipschitz.is_finite() && *lipschitz >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidModel(format!("sigma parameters must be finite: {self:?}")))
        }
    }
}

/// Initial condition on the unit torus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialCondition {
    Constant { c: f64 },
    /// `u₀(x) = mean + Σ_j cosine[j] cos(2π(j+1)x) + sine[j] sin(2π(j+1)x)`.
    SmoothPeriodic {
        mean: f64,
        #[serde(default)]
        cosine: Vec<f64>,
        #[serde(default)]
        sine: Vec<f64>,
    },
}

impl InitialCondition {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            InitialCondition::Constant { c } => *c,
            InitialCondition::SmoothPeriodic { mean, cosine, sine } => {
                let mut v = *mean;
                for (j, c) in cosine.iter().enumerate() {
                    v += c * (2.0 * PI * (j + 1) as f64 * x).cos();
                }
                for (j, s) in sine.iter().enumerate() {
                    v += s * (2.0 * PI * (j + 1) as f64 * x).sin();
                }
                v
            }
        }
    }

    /// Highest frequency present.
    pub fn bandwidth(&self) -> usize {
        match self {
            InitialCondition::Constant { .. } => 0,
            InitialCondition::SmoothPeriodic { cosine, sine, .. } => cosine.len().max(sine.len()),
        }
    }

    fn validate(&self) -> Result<()> {
        let finite = match self {
            InitialCondition::Constant { c } => c.is_finite(),
            InitialCondition::SmoothPeriodic { mean, cosine, sine } => {
                mean.is_finite() && cosine.iter().chain(sine).all(|v| v.is_finite())
            }
        };
        if finite {
            Ok(())
        } else {
            Err(Error::InvalidModel("initial condition coefficients must be finite".into()))
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub noise: NoiseParams,
    pub sigma: Sigma,
    pub u0: InitialCondition,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        self.sigma.validate()?;
        self.u0.validate()
    }

    /// Additive noise, `σ ≡ c`, `u₀ ≡ 0`.
    pub fn additive(alpha: f64, c: f64) -> Result<Self> {
        let m = Self {
            noise: NoiseParams::new(alpha, 1)?,
            sigma: Sigma::Constant { c },
            u0: InitialCondition::Constant { c: 0.0 },
        };
        m.validate()?;
        Ok(m)
    }

    /// Parabolic Anderson model `σ(x) = σ₀ x`, `u₀ ≡ 1`.
    pub fn parabolic_anderson(alpha: f64, sigma0: f64) -> Result<Self> {
        let m = Self {
            noise: NoiseParams::new(alpha, 1)?,
            sigma: Sigma::Linear { sigma0 },
            u0: InitialCondition::Constant { c: 1.0 },
        };
        m.validate()?;
        Ok(m)
    }
}
