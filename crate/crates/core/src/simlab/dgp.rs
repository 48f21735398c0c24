//! Gaussian data-generating processes with closed-form CQCs.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Arm, Dataset, Sample};
use crate::error::{Error, Result};
use crate::rng;
use crate::stats::{self, normal_quantile, sigmoid};

/// Conditional mean and propensity families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DgpKind {
    /// `μ₀ = sin(π vᵀx)`, `μ₁ = μ₀ + γ vᵀx`, logit `vᵀx`.
    SinLinear { gamma: f64, v: Vec<f64> },
    /// One covariate: `μ₀ = cos 6x`, `μ₁ = 2 cos 6x + γx`, logit `x`.
    CosLinear { gamma: f64 },
    /// One covariate: `μ₀ = sin 10x`, `μ₁ = 2 sin 10x`, logit `x`.
    Fig1,
    /// Affine means and logit.
    Affine {
        mu0_intercept: f64,
        mu0_slope: Vec<f64>,
        mu1_intercept: f64,
        mu1_slope: Vec<f64>,
        logit_intercept: f64,
        logit_slope: Vec<f64>,
    },
}

/// `X ~ N(0, I_d)`, `A | X ~ Bernoulli(sigmoid(logit(X)))`,
/// `Y | X, A=a ~ N(μ_a(X), σ_a²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub d: usize,
    pub sigma0: f64,
    pub sigma1: f64,
    pub kind: DgpKind,
}

pub const REGISTRY: &[&str] = &["sin_linear", "cos_linear", "fig1", "affine"];

impl DgpSpec {
    fn checked(self) -> Result<Self> {
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) || !(self.sigma1 > 0.0 && self.sigma1.is_finite()) {
            return Err(Error::invalid(format!(
                "outcome standard deviations must be positive (got {}, {})",
                self.sigma0, self.sigma1
            )));
        }
        let dims_ok = match &self.kind {
            DgpKind::SinLinear { v, .. } => v.len() == self.d,
            DgpKind::CosLinear { .. } | DgpKind::Fig1 => self.d == 1,
            DgpKind::Affine {
                mu0_slope,
                mu1_slope,
                logit_slope,
                ..
            } => mu0_slope.len() == self.d && mu1_slope.len() == self.d && logit_slope.len() == self.d,
        };
        if !dims_ok {
            return Err(Error::invalid(format!("coefficient lengths do not match d = {}", self.d)));
        }
        Ok(self)
    }

    /// Multi-covariate design with a direction `v = √d · u/‖u‖`,
    /// `u ~ N(0, I_d)` drawn from `seed`.
    pub fn sin_linear(gamma: f64, d: usize, seed: u64) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("d must be at least 1"));
        }
        let mut r = rng::rng_from(seed, &[0xD1_2EC7]);
        let u: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
        let scale = (d as f64).sqrt() / stats::norm(&u);
        let v = u.iter().map(|ui| ui * scale).collect();
        Self::sin_linear_with(gamma, v)
    }

    pub fn sin_linear_with(gamma: f64, v: Vec<f64>) -> Result<Self> {
        DgpSpec {
            d: v.len(),
            sigma0: 1.0,
            sigma1: 1.0,
            kind: DgpKind::SinLinear { gamma, v },
        }
        .checked()
    }

    pub fn cos_linear(gamma: f64) -> Self {
        DgpSpec {
            d: 1,
            sigma0: 1.0,
            sigma1: 2.0,
            kind: DgpKind::CosLinear { gamma },
        }
    }

    pub fn fig1() -> Self {
        DgpSpec {
            d: 1,
            sigma0: 1.0,
            sigma1: 2.0,
            kind: DgpKind::Fig1,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn affine(
        d: usize,
        mu0_intercept: f64,
        mu0_slope: Vec<f64>,
        mu1_intercept: f64,
        mu1_slope: Vec<f64>,
        sigma0: f64,
        sigma1: f64,
        logit_intercept: f64,
        logit_slope: Vec<f64>,
    ) -> Result<Self> {
        DgpSpec {
            d,
            sigma0,
            sigma1,
            kind: DgpKind::Affine {
                mu0_intercept,
                mu0_slope,
                mu1_intercept,
                mu1_slope,
                logit_intercept,
                logit_slope,
            },
        }
        .checked()
    }

    /// Registry lookup by name. `gamma` is ignored by `fig1` and `affine`
    /// is not constructible by name.
    pub fn by_name(name: &str, gamma: f64, d: usize, seed: u64) -> Result<Self> {
        match name {
            "sin_linear" | "sec4" => Self::sin_linear(gamma, d, seed),
            "cos_linear" | "appD1" => Ok(Self::cos_linear(gamma)),
            "fig1" => Ok(Self::fig1()),
            other => Err(Error::invalid(format!(
                "unknown DGP `{other}`; available: {}",
                REGISTRY[..3].join(", ")
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            DgpKind::SinLinear { .. } => "sin_linear",
            DgpKind::CosLinear { .. } => "cos_linear",
            DgpKind::Fig1 => "fig1",
            DgpKind::Affine { .. } => "affine",
        }
    }

    pub fn mean(&self, arm: Arm, x: &[f64]) -> f64 {
        let t = arm.indicator();
        match &self.kind {
            DgpKind::SinLinear { gamma, v } => {
                let vx = stats::dot(v, x);
                (std::f64::consts::PI * vx).sin() + t * gamma * vx
            }
            DgpKind::CosLinear { gamma } => {
                let c = (6.0 * x[0]).cos();
                (1.0 + t) * c + t * gamma * x[0]
            }
            DgpKind::Fig1 => (1.0 + t) * (10.0 * x[0]).sin(),
            DgpKind::Affine {
                mu0_intercept,
                mu0_slope,
                mu1_intercept,
                mu1_slope,
                ..
            } => match arm {
                Arm::Control => mu0_intercept + stats::dot(mu0_slope, x),
                Arm::Treated => mu1_intercept + stats::dot(mu1_slope, x),
            },
        }
    }

    pub fn sigma(&self, arm: Arm) -> f64 {
        match arm {
            Arm::Control => self.sigma0,
            Arm::Treated => self.sigma1,
        }
    }

    pub fn propensity_logit(&self, x: &[f64]) -> f64 {
        match &self.kind {
            DgpKind::SinLinear { v, .. } => stats::dot(v, x),
            DgpKind::CosLinear { .. } | DgpKind::Fig1 => x[0],
            DgpKind::Affine {
                logit_intercept,
                logit_slope,
                ..
            } => logit_intercept + stats::dot(logit_slope, x),
        }
    }

    pub fn propensity(&self, x: &[f64]) -> f64 {
        sigmoid(self.propensity_logit(x))
    }

    /// `cqc*(y₀|x) = μ₁(x) + (σ₁/σ₀)(y₀ − μ₀(x))`.
    pub fn cqc(&self, y0: f64, x: &[f64]) -> f64 {
        self.mean(Arm::Treated, x) + self.sigma1 / self.sigma0 * (y0 - self.mean(Arm::Control, x))
    }

    pub fn draw_x<R: Rng + ?Sized>(&self, r: &mut R) -> Vec<f64> {
        (0..self.d).map(|_| r.sample(StandardNormal)).collect()
    }

    /// Exact draw from `Y | X=x, A=arm` by inverse CDF of a uniform.
    pub fn quantile(&self, arm: Arm, x: &[f64], u: f64) -> f64 {
        self.mean(arm, x) + self.sigma(arm) * normal_quantile(u)
    }

    pub fn draw_sample<R: Rng + ?Sized>(&self, r: &mut R) -> Sample {
        let x = self.draw_x(r);
        let treated = r.random::<f64>() < self.propensity(&x);
        let a = if treated { Arm::Treated } else { Arm::Control };
        let e: f64 = r.sample(StandardNormal);
        Sample {
            y: self.mean(a, &x) + self.sigma(a) * e,
            x,
            a,
        }
    }

    pub fn generate(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::invalid("n must be at least 1"));
        }
        let mut r = rng::rng_from(seed, &[0x6E4E]);
        let samples = (0..n).map(|_| self.draw_sample(&mut r)).collect();
        Dataset::new(self.d, samples)
    }
}

/// Free-function form of [`DgpSpec::generate`].
pub fn generate(dgp: &DgpSpec, n: usize, seed: u64) -> Result<Dataset> {
    dgp.generate(n, seed)
}
