//! Parameterised CQC function classes `cqc_θ(y₀|x)` with exact parameter
//! gradients: linear-in-features models (affine shift/scale, random Fourier
//! features, user-supplied maps) and small fully connected networks.

use std::f64::consts::TAU;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::stats;

/// Anything that maps `(y₀, x)` to a predicted treated outcome.
pub trait CqcFunction: Send + Sync {
    fn cqc(&self, y0: f64, x: &[f64]) -> f64;
}

impl<F: Fn(f64, &[f64]) -> f64 + Send + Sync> CqcFunction for F {
    fn cqc(&self, y0: f64, x: &[f64]) -> f64 {
        self(y0, x)
    }
}

/// `[x·y₀, y₀, x, 1]`, so that `θ = [θ_scale, θ_scale0, θ_shift, θ_shift0]`
/// gives `(θ_scaleᵀx + θ_scale0)·y₀ + θ_shiftᵀx + θ_shift0`.
pub fn affine_features(y0: f64, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; 2 * (x.len() + 1)];
    affine_into(y0, x, &mut out);
    out
}

fn affine_into(y0: f64, x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (o, xi) in out[..d].iter_mut().zip(x) {
        *o = xi * y0;
    }
    out[d] = y0;
    out[d + 1..2 * d + 1].copy_from_slice(x);
    out[2 * d + 1] = 1.0;
}

/// Frozen random Fourier feature parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RffParams {
    pub num_features: usize,
    pub lengthscale: f64,
    pub seed: u64,
    /// `num_features × (d + 1)` frequencies, row-major.
    omega: Vec<f64>,
    phase: Vec<f64>,
    input_dim: usize,
}

impl RffParams {
    pub fn new(d: usize, num_features: usize, lengthscale: f64, seed: u64) -> Result<Self> {
        if num_features == 0 {
            return Err(Error::invalid("random Fourier features need at least one feature"));
        }
        if !(lengthscale > 0.0 && lengthscale.is_finite()) {
            return Err(Error::invalid(format!("lengthscale must be positive, got {lengthscale}")));
        }
        let input_dim = d + 1;
        let mut r = rng::rng_from(seed, &[0x4FF]);
        let omega = (0..num_features * input_dim)
            .map(|_| r.sample::<f64, _>(StandardNormal) / lengthscale)
            .collect();
        let phase = (0..num_features).map(|_| r.random::<f64>() * TAU).collect();
        Ok(RffParams {
            num_features,
            lengthscale,
            seed,
            omega,
            phase,
            input_dim,
        })
    }

    fn eval_into(&self, y0: f64, x: &[f64], out: &mut [f64]) {
        let scale = (2.0 / self.num_features as f64).sqrt();
        for (j, o) in out.iter_mut().enumerate() {
            let w = &self.omega[j * self.input_dim..(j + 1) * self.input_dim];
            let arg = w[0] * y0 + stats::dot(&w[1..], x) + self.phase[j];
            *o = scale * arg.cos();
        }
    }
}

/// `√(2/p)·cos(ωⱼ·[y₀; x] + bⱼ)`, `j = 1..p`.
pub fn rff_features(y0: f64, x: &[f64], spec: &RffParams) -> Result<Vec<f64>> {
    if x.len() + 1 != spec.input_dim {
        return Err(Error::DimensionMismatch {
            context: "random Fourier features",
            expected: spec.input_dim - 1,
            got: x.len(),
        });
    }
    let mut out = vec![0.0; spec.num_features];
    spec.eval_into(y0, x, &mut out);
    Ok(out)
}

pub type CustomFeatureFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;

#[derive(Clone)]
enum FeatureImpl {
    Affine,
    Rff(RffParams),
    Custom(Arc<CustomFeatureFn>),
}

/// Serializable description of a feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    AffineShiftScale,
    RandomFourier {
        num_features: usize,
        lengthscale: f64,
        seed: u64,
    },
    Custom {
        name: String,
        p: usize,
    },
}

#[derive(Clone)]
pub struct FeatureMap {
    d: usize,
    p: usize,
    rho_bound: Option<f64>,
    kind: FeatureKind,
    imp: FeatureImpl,
}

impl fmt::Debug for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeatureMap")
            .field("kind", &self.kind)
            .field("d", &self.d)
            .field("p", &self.p)
            .field("rho_bound", &self.rho_bound)
            .finish()
    }
}

impl PartialEq for FeatureMap {
    fn eq(&self, other: &Self) -> bool {
        self.d == other.d && self.p == other.p && self.rho_bound == other.rho_bound && self.kind == other.kind
    }
}

impl FeatureMap {
    pub fn affine(d: usize) -> Self {
        FeatureMap {
            d,
            p: 2 * (d + 1),
            rho_bound: None,
            kind: FeatureKind::AffineShiftScale,
            imp: FeatureImpl::Affine,
        }
    }

    pub fn random_fourier(d: usize, num_features: usize, lengthscale: f64, seed: u64) -> Result<Self> {
        let params = RffParams::new(d, num_features, lengthscale, seed)?;
        Ok(FeatureMap {
            d,
            p: num_features,
            rho_bound: None,
            kind: FeatureKind::RandomFourier {
                num_features,
                lengthscale,
                seed,
            },
            imp: FeatureImpl::Rff(params),
        })
    }

    /// A user-supplied map writing `p` features into the output slice.
    /// Custom maps cannot be restored from JSON.
    pub fn custom(name: impl Into<String>, d: usize, p: usize, f: Arc<CustomFeatureFn>) -> Self {
        let name = name.into();
        FeatureMap {
            d,
            p,
            rho_bound: None,
            kind: FeatureKind::Custom { name, p },
            imp: FeatureImpl::Custom(f),
        }
    }

    pub fn from_kind(kind: &FeatureKind, d: usize) -> Result<Self> {
        match kind {
            FeatureKind::AffineShiftScale => Ok(Self::affine(d)),
            FeatureKind::RandomFourier {
                num_features,
                lengthscale,
                seed,
            } => Self::random_fourier(d, *num_features, *lengthscale, *seed),
            FeatureKind::Custom { name, .. } => Err(Error::invalid(format!(
                "custom feature map `{name}` cannot be rebuilt from its description"
            ))),
        }
    }

    pub fn with_rho_bound(mut self, rho: f64) -> Self {
        self.rho_bound = Some(rho);
        self
    }

    pub fn kind(&self) -> &FeatureKind {
        &self.kind
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn rho_bound(&self) -> Option<f64> {
        self.rho_bound
    }

    pub fn eval_into(&self, y0: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        if x.len() != self.d {
            return Err(Error::DimensionMismatch {
                context: "feature map input",
                expected: self.d,
                got: x.len(),
            });
        }
        debug_assert_eq!(out.len(), self.p);
        match &self.imp {
            FeatureImpl::Affine => affine_into(y0, x, out),
            FeatureImpl::Rff(p) => p.eval_into(y0, x, out),
            FeatureImpl::Custom(f) => f(y0, x, out),
        }
        if let Some(bound) = self.rho_bound {
            let norm = stats::norm(out);
            if norm > bound {
                return Err(Error::FeatureNorm { norm, bound });
            }
        }
        Ok(())
    }

    pub fn eval(&self, y0: f64, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.p];
        self.eval_into(y0, x, &mut out)?;
        Ok(out)
    }
}

/// `cqc_θ(y₀|x) = θᵀφ(y₀, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCqc {
    pub theta: Vec<f64>,
    pub features: FeatureMap,
}

impl LinearCqc {
    pub fn zeros(features: FeatureMap) -> Self {
        LinearCqc {
            theta: vec![0.0; features.p()],
            features,
        }
    }

    pub fn new(theta: Vec<f64>, features: FeatureMap) -> Result<Self> {
        if theta.len() != features.p() {
            return Err(Error::DimensionMismatch {
                context: "linear CQC parameters",
                expected: features.p(),
                got: theta.len(),
            });
        }
        Ok(LinearCqc { theta, features })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Fully connected network on the input `[y₀, x]` with a scalar linear
/// output. Parameters are stored flat, layer by layer, each layer as its
/// weight matrix (row-major, `out × in`) followed by its bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpCqc {
    widths: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

impl MlpCqc {
    /// Glorot-uniform weights and zero biases.
    pub fn new(d: usize, hidden: &[usize], activation: Activation, seed: u64) -> Self {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(d + 1);
        widths.extend_from_slice(hidden);
        widths.push(1);
        let mut r = rng::rng_from(seed, &[0x3119]);
        let mut params = Vec::new();
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| r.random_range(-limit..limit)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        MlpCqc {
            widths,
            activation,
            params,
        }
    }

    pub fn from_params(widths: Vec<usize>, activation: Activation, params: Vec<f64>) -> Result<Self> {
        if widths.len() < 2 || *widths.last().unwrap() != 1 {
            return Err(Error::invalid("network widths must end in a single output"));
        }
        let expected: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "network parameters",
                expected,
                got: params.len(),
            });
        }
        Ok(MlpCqc {
            widths,
            activation,
            params,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn d(&self) -> usize {
        self.widths[0] - 1
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() + 1 != self.widths[0] {
            return Err(Error::DimensionMismatch {
                context: "network input",
                expected: self.widths[0] - 1,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Forward pass; returns pre-activations and activations of every layer
    /// (index 0 is the input).
    fn forward(&self, y0: f64, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut input = Vec::with_capacity(x.len() + 1);
        input.push(y0);
        input.extend_from_slice(x);
        let layers = self.widths.len() - 1;
        let mut zs = vec![input.clone()];
        let mut acts = vec![input];
        let mut off = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            off += n_in * n_out + n_out;
            let prev = &acts[l];
            let z: Vec<f64> = (0..n_out)
                .map(|o| stats::dot(&w[o * n_in..(o + 1) * n_in], prev) + b[o])
                .collect();
            let a = if l + 1 == layers {
                z.clone()
            } else {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            };
            zs.push(z);
            acts.push(a);
        }
        (zs, acts)
    }

    fn value(&self, y0: f64, x: &[f64]) -> f64 {
        self.forward(y0, x).1.last().unwrap()[0]
    }

    /// Reverse-mode gradient of the scalar output with respect to all
    /// parameters, written into `grad`.
    fn backward(&self, y0: f64, x: &[f64], grad: &mut [f64]) -> f64 {
        let (zs, acts) = self.forward(y0, x);
        let layers = self.widths.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += self.widths[l] * self.widths[l + 1] + self.widths[l + 1];
        }
        let mut delta = vec![1.0];
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let o = offsets[l];
            let prev = &acts[l];
            for j in 0..n_out {
                let gw = &mut grad[o + j * n_in..o + (j + 1) * n_in];
                for (g, p) in gw.iter_mut().zip(prev) {
                    *g = delta[j] * p;
                }
                grad[o + n_in * n_out + j] = delta[j];
            }
            if l > 0 {
                let w = &self.params[o..o + n_in * n_out];
                let mut next = vec![0.0; n_in];
                for j in 0..n_out {
                    for (i, nx) in next.iter_mut().enumerate() {
                        *nx += w[j * n_in + i] * delta[j];
                    }
                }
                for (i, nx) in next.iter_mut().enumerate() {
                    *nx *= self.activation.derivative(zs[l][i], acts[l][i]);
                }
                delta = next;
            }
        }
        acts.last().unwrap()[0]
    }
}

/// A CQC model whose parameters the optimizer can update.
#[derive(Debug, Clone, PartialEq)]
pub enum CqcModel {
    Linear(LinearCqc),
    Mlp(MlpCqc),
}

impl CqcModel {
    pub fn num_params(&self) -> usize {
        self.params().len()
    }

    pub fn params(&self) -> &[f64] {
        match self {
            CqcModel::Linear(m) => &m.theta,
            CqcModel::Mlp(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            CqcModel::Linear(m) => &mut m.theta,
            CqcModel::Mlp(m) => &mut m.params,
        }
    }

    pub fn set_params(&mut self, p: &[f64]) {
        self.params_mut().copy_from_slice(p);
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, CqcModel::Linear(_))
    }

    pub fn d(&self) -> usize {
        match self {
            CqcModel::Linear(m) => m.features.d(),
            CqcModel::Mlp(m) => m.d(),
        }
    }

    pub fn features(&self) -> Option<&FeatureMap> {
        match self {
            CqcModel::Linear(m) => Some(&m.features),
            CqcModel::Mlp(_) => None,
        }
    }

    pub fn value(&self, y0: f64, x: &[f64]) -> Result<f64> {
        match self {
            CqcModel::Linear(m) => {
                let mut phi = vec![0.0; m.features.p()];
                m.features.eval_into(y0, x, &mut phi)?;
                Ok(stats::dot(&m.theta, &phi))
            }
            CqcModel::Mlp(m) => {
                m.check_input(x)?;
                Ok(m.value(y0, x))
            }
        }
    }

    /// Value and `∇_θ` written into `grad` (length `num_params`).
    pub fn eval_grad_into(&self, y0: f64, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        match self {
            CqcModel::Linear(m) => {
                m.features.eval_into(y0, x, grad)?;
                Ok(stats::dot(&m.theta, grad))
            }
            CqcModel::Mlp(m) => {
                m.check_input(x)?;
                Ok(m.backward(y0, x, grad))
            }
        }
    }

    pub fn eval_and_grad(&self, y0: f64, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut g = vec![0.0; self.num_params()];
        let v = self.eval_grad_into(y0, x, &mut g)?;
        Ok((v, g))
    }
}

impl CqcFunction for CqcModel {
    /// Panics on dimension mismatch or a violated feature-norm bound; use
    /// [`CqcModel::value`] for the checked form.
    fn cqc(&self, y0: f64, x: &[f64]) -> f64 {
        self.value(y0, x).expect("CQC model evaluation")
    }
}

/// Euclidean projection onto `{θ : ‖θ‖ ≤ B}`.
pub fn project_ball(theta: &[f64], b: f64) -> Result<Vec<f64>> {
    let mut out = theta.to_vec();
    project_ball_in_place(&mut out, b)?;
    Ok(out)
}

pub fn project_ball_in_place(theta: &mut [f64], b: f64) -> Result<()> {
    if !(b > 0.0) {
        return Err(Error::invalid(format!("projection radius must be positive, got {b}")));
    }
    let n = stats::norm(theta);
    if n > b {
        let s = b / n;
        theta.iter_mut().for_each(|t| *t *= s);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// JSON

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ModelFile {
    Linear {
        d: usize,
        features: FeatureKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rho_bound: Option<f64>,
        theta: Vec<f64>,
    },
    Mlp {
        widths: Vec<usize>,
        activation: Activation,
        params: Vec<f64>,
    },
}

impl Serialize for CqcModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            CqcModel::Linear(m) => ModelFile::Linear {
                d: m.features.d(),
                features: m.features.kind().clone(),
                rho_bound: m.features.rho_bound(),
                theta: m.theta.clone(),
            },
            CqcModel::Mlp(m) => ModelFile::Mlp {
                widths: m.widths.clone(),
                activation: m.activation,
                params: m.params.clone(),
            },
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CqcModel {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        match ModelFile::deserialize(de)? {
            ModelFile::Linear {
                d,
                features,
                rho_bound,
                theta,
            } => {
                let mut fm = FeatureMap::from_kind(&features, d).map_err(D::Error::custom)?;
                if let Some(r) = rho_bound {
                    fm = fm.with_rho_bound(r);
                }
                LinearCqc::new(theta, fm).map(CqcModel::Linear).map_err(D::Error::custom)
            }
            ModelFile::Mlp {
                widths,
                activation,
                params,
            } => MlpCqc::from_params(widths, activation, params)
                .map(CqcModel::Mlp)
                .map_err(D::Error::custom),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, proptest};

    #[test]
    fn affine_examples() {
        assert_eq!(affine_features(2.0, &[3.0]), vec![6.0, 2.0, 3.0, 1.0]);
        assert_eq!(affine_features(0.0, &[1.5, -2.0]), vec![0.0, 0.0, 0.0, 1.5, -2.0, 1.0]);
        let m = LinearCqc::new(vec![0.0, 2.0, 1.7, 0.0], FeatureMap::affine(1)).unwrap();
        let m = CqcModel::Linear(m);
        assert!((m.cqc(0.8, &[-0.4]) - (2.0 * 0.8 + 1.7 * -0.4)).abs() < 1e-15);
        assert!(FeatureMap::affine(2).eval(0.0, &[1.0]).is_err());
    }

    #[test]
    fn rff_norm_bound_and_determinism() {
        let f = FeatureMap::random_fourier(3, 64, 0.7, 5).unwrap();
        let g = FeatureMap::random_fourier(3, 64, 0.7, 5).unwrap();
        let mut r = rng::rng_from(1, &[]);
        for _ in 0..10_000 {
            let y0 = r.sample::<f64, _>(StandardNormal) * 10.0;
            let x: Vec<f64> = (0..3).map(|_| r.sample::<f64, _>(StandardNormal) * 10.0).collect();
            let phi = f.eval(y0, &x).unwrap();
            assert!(stats::norm(&phi) <= 2f64.sqrt() + 1e-12);
            assert_eq!(phi, g.eval(y0, &x).unwrap());
        }
        assert!(FeatureMap::random_fourier(3, 0, 0.7, 5).is_err());
    }

    #[test]
    fn rff_approximates_rbf_kernel() {
        let p = 40_000;
        let ell = 0.9;
        let spec = RffParams::new(1, p, ell, 17).unwrap();
        let (u, v) = ([0.3, -0.2], [0.9, 0.4]);
        let a = rff_features(u[0], &u[1..], &spec).unwrap();
        let b = rff_features(v[0], &v[1..], &spec).unwrap();
        // φ(u)·φ(v) is the mean of p i.i.d. terms p·aⱼbⱼ.
        let terms: Vec<f64> = a.iter().zip(&b).map(|(x, y)| p as f64 * x * y).collect();
        let est = stats::mean(&terms);
        let se = stats::std_error(&terms);
        let sq = (u[0] - v[0]) * (u[0] - v[0]) + (u[1] - v[1]) * (u[1] - v[1]);
        let exact = (-sq / (2.0 * ell * ell)).exp();
        assert!((est - exact).abs() < 3.0 * se, "{est} vs {exact} (se {se})");
    }

    #[test]
    fn rho_bound_is_enforced() {
        let f = FeatureMap::affine(1).with_rho_bound(2.0);
        assert!(f.eval(0.5, &[0.5]).is_ok());
        assert!(matches!(f.eval(5.0, &[5.0]), Err(Error::FeatureNorm { .. })));
    }

    #[test]
    fn linear_zero_theta() {
        let m = CqcModel::Linear(LinearCqc::zeros(FeatureMap::affine(2)));
        let (v, g) = m.eval_and_grad(1.5, &[2.0, -1.0]).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g, affine_features(1.5, &[2.0, -1.0]));
    }

    #[test]
    fn zero_network_is_zero() {
        let m = MlpCqc::new(3, &[20, 20], Activation::Relu, 1);
        let zero = MlpCqc::from_params(m.widths.clone(), Activation::Relu, vec![0.0; m.params.len()]).unwrap();
        let m = CqcModel::Mlp(zero);
        assert_eq!(m.cqc(4.0, &[1.0, 2.0, 3.0]), 0.0);
        assert_eq!(m.num_params(), 4 * 20 + 20 + 20 * 20 + 20 + 20 + 1);
    }

    fn fd_check(act: Activation, tol: f64) {
        let mut r = rng::rng_from(99, &[act as u64]);
        let base = MlpCqc::new(2, &[20, 20], act, 3);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let mut m = base.clone();
            for p in m.params.iter_mut() {
                *p += 0.1 * r.sample::<f64, _>(StandardNormal);
            }
            let y0 = r.sample::<f64, _>(StandardNormal);
            let x = [r.sample::<f64, _>(StandardNormal), r.sample::<f64, _>(StandardNormal)];
            let model = CqcModel::Mlp(m.clone());
            let (_, g) = model.eval_and_grad(y0, &x).unwrap();
            let h = 1e-5;
            let mut fd = vec![0.0; g.len()];
            for (k, f) in fd.iter_mut().enumerate() {
                let mut up = m.clone();
                up.params[k] += h;
                let mut dn = m.clone();
                dn.params[k] -= h;
                *f = (up.value(y0, &x) - dn.value(y0, &x)) / (2.0 * h);
            }
            let diff: Vec<f64> = g.iter().zip(&fd).map(|(a, b)| a - b).collect();
            let rel = stats::norm(&diff) / stats::norm(&fd).max(1e-12);
            worst = worst.max(rel);
        }
        assert!(worst <= tol, "relative error {worst}");
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        fd_check(Activation::Tanh, 1e-4);
        fd_check(Activation::Relu, 1e-2);
    }

    #[test]
    fn projection_examples() {
        let p = project_ball(&[3.0, 4.0], 1.0).unwrap();
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.8).abs() < 1e-15);
        assert_eq!(project_ball(&[0.1, 0.2], 1.0).unwrap(), vec![0.1, 0.2]);
        assert_eq!(project_ball(&[0.0, 0.0], 3.0).unwrap(), vec![0.0, 0.0]);
        assert!(project_ball(&[1.0], 0.0).is_err());
    }

    #[test]
    fn model_json_roundtrip() {
        let lin = CqcModel::Linear(LinearCqc::new(vec![0.1, 0.2, 0.3, 0.4], FeatureMap::affine(1)).unwrap());
        let rff = CqcModel::Linear(LinearCqc::new(vec![0.5; 8], FeatureMap::random_fourier(2, 8, 1.3, 4).unwrap()).unwrap());
        let mlp = CqcModel::Mlp(MlpCqc::new(2, &[5, 4], Activation::Tanh, 8));
        for m in [lin, rff, mlp] {
            let s = serde_json::to_string(&m).unwrap();
            let back: CqcModel = serde_json::from_str(&s).unwrap();
            assert_eq!(back, m);
            let x = vec![0.3; m.d()];
            assert_eq!(back.cqc(0.7, &x), m.cqc(0.7, &x));
        }
    }

    proptest! {
        #[test]
        fn linear_in_theta(
            a in -3.0f64..3.0, b in -3.0f64..3.0,
            t1 in prop::collection::vec(-2.0f64..2.0, 6),
            t2 in prop::collection::vec(-2.0f64..2.0, 6),
            y0 in -5.0f64..5.0, x in prop::collection::vec(-3.0f64..3.0, 2),
        ) {
            let f = FeatureMap::affine(2);
            let mix: Vec<f64> = t1.iter().zip(&t2).map(|(p, q)| a * p + b * q).collect();
            let eval = |t: &[f64]| CqcModel::Linear(LinearCqc::new(t.to_vec(), f.clone()).unwrap()).cqc(y0, &x);
            let lhs = eval(&mix);
            let rhs = a * eval(&t1) + b * eval(&t2);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
        }

        #[test]
        fn projection_bounded_and_idempotent(
            t in prop::collection::vec(-100.0f64..100.0, 1..8), b in 0.01f64..50.0,
        ) {
            let p = project_ball(&t, b).unwrap();
            prop_assert!(stats::norm(&p) <= b + 1e-12);
            let q = project_ball(&p, b).unwrap();
            for (u, v) in p.iter().zip(&q) {
                prop_assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()));
            }
        }
    }
}
