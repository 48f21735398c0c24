//! Nuisance functions: propensity `π(x)` and the per-arm conditional CDFs
//! `F_a(y | x)`.
//!
//! Every nuisance sits behind a trait object so fitted, oracle and perturbed
//! versions are interchangeable. Conditional CDFs can be *conditioned* on a
//! covariate vector once and then queried at many outcome values, which is
//! how the optimizer and the loss evaluate them in inner loops.

use std::f64::consts::TAU;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Arm, Dataset};
use crate::error::{Error, Result};
use crate::rng;
use crate::simlab::DgpSpec;
use crate::stats::{self, logit, normal_cdf, sigmoid};

pub const DEFAULT_CLIP: f64 = 0.01;

/// `y ↦ F(y | x)` for one fixed `x`.
pub trait ConditionalCdf: Send + Sync {
    fn cdf(&self, y: f64) -> f64;
}

pub trait CcdfFn: Send + Sync + fmt::Debug {
    fn condition<'a>(&'a self, x: &[f64]) -> Box<dyn ConditionalCdf + 'a>;

    fn eval(&self, y: f64, x: &[f64]) -> f64 {
        self.condition(x).cdf(y)
    }
}

pub trait PropensityFn: Send + Sync + fmt::Debug {
    fn eval(&self, x: &[f64]) -> f64;
}

// ---------------------------------------------------------------------------
// Propensity: L2-penalised logistic regression

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticPropensity {
    pub beta: Vec<f64>,
    pub beta0: f64,
    pub clip: f64,
}

impl LogisticPropensity {
    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        self.beta0 + stats::dot(&self.beta, x)
    }
}

impl PropensityFn for LogisticPropensity {
    fn eval(&self, x: &[f64]) -> f64 {
        sigmoid(self.linear_predictor(x)).clamp(self.clip, 1.0 - self.clip)
    }
}

/// Result of [`fit_propensity_traced`]: the model plus the objective value
/// after every accepted Newton step (first entry is the starting value).
#[derive(Debug, Clone)]
pub struct PropensityFit {
    pub model: LogisticPropensity,
    pub objective_trace: Vec<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
}

const PROPENSITY_TOL: f64 = 1e-8;
const PROPENSITY_MAX_ITER: usize = 100;

/// Fits `π̂(x) = sigmoid(β₀ + βᵀx)` by damped Newton (IRLS) on the mean
/// negative log-likelihood plus `l2/2 · ‖β‖²` (intercept unpenalised).
pub fn fit_propensity(data: &Dataset, l2: f64, clip: f64) -> Result<LogisticPropensity> {
    fit_propensity_traced(data, l2, clip).map(|f| f.model)
}

pub fn fit_propensity_traced(data: &Dataset, l2: f64, clip: f64) -> Result<PropensityFit> {
    if !(clip > 0.0 && clip < 0.5) {
        return Err(Error::invalid(format!("clip must lie in (0, 0.5), got {clip}")));
    }
    if !(l2 >= 0.0) {
        return Err(Error::invalid(format!("l2 must be nonnegative, got {l2}")));
    }
    let n = data.len();
    let treated = data.count_arm(Arm::Treated);
    if treated == 0 {
        return Err(Error::DegenerateTreatment(0));
    }
    if treated == n {
        return Err(Error::DegenerateTreatment(1));
    }
    let d = data.dim();
    let p = d + 1;
    let nf = n as f64;

    let objective = |w: &DVector<f64>| -> f64 {
        let mut nll = 0.0;
        for s in data.iter() {
            let eta = w[0] + stats::dot(&w.as_slice()[1..], &s.x);
            // -log sigmoid(±eta) in a stable form
            let z = if s.a.is_treated() { -eta } else { eta };
            nll += softplus(z);
        }
        let pen: f64 = w.iter().skip(1).map(|b| b * b).sum();
        nll / nf + 0.5 * l2 * pen
    };
    let grad_hess = |w: &DVector<f64>| -> (DVector<f64>, DMatrix<f64>) {
        let mut g = DVector::zeros(p);
        let mut h = DMatrix::zeros(p, p);
        let mut row = vec![1.0; p];
        for s in data.iter() {
            row[1..].copy_from_slice(&s.x);
            let eta = w[0] + stats::dot(&w.as_slice()[1..], &s.x);
            let mu = sigmoid(eta);
            let r = mu - s.a.indicator();
            let v = mu * (1.0 - mu);
            for i in 0..p {
                g[i] += r * row[i];
                for j in 0..=i {
                    h[(i, j)] += v * row[i] * row[j];
                }
            }
        }
        g /= nf;
        h /= nf;
        for i in 0..p {
            for j in 0..i {
                h[(j, i)] = h[(i, j)];
            }
        }
        for i in 1..p {
            g[i] += l2 * w[i];
            h[(i, i)] += l2;
        }
        (g, h)
    };

    let mut w = DVector::zeros(p);
    let mut obj = objective(&w);
    let mut trace = vec![obj];
    let mut iterations = 0;
    loop {
        let (g, h) = grad_hess(&w);
        let gn = g.norm();
        if gn <= PROPENSITY_TOL {
            let model = LogisticPropensity {
                beta: w.as_slice()[1..].to_vec(),
                beta0: w[0],
                clip,
            };
            return Ok(PropensityFit {
                model,
                objective_trace: trace,
                grad_norm: gn,
                iterations,
            });
        }
        if iterations >= PROPENSITY_MAX_ITER {
            return Err(Error::NonConvergence {
                iterations,
                grad_norm: gn,
            });
        }
        iterations += 1;
        let step = newton_direction(h, &g);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &w - t * &step;
            let c_obj = objective(&cand);
            if c_obj <= obj {
                w = cand;
                obj = c_obj;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // Newton direction failed to decrease; fall back to a tiny gradient step.
            let cand = &w - 1e-3 * &g;
            let c_obj = objective(&cand);
            if c_obj > obj {
                return Err(Error::NonConvergence {
                    iterations,
                    grad_norm: gn,
                });
            }
            w = cand;
            obj = c_obj;
        }
        trace.push(obj);
    }
}

fn newton_direction(h: DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let p = h.nrows();
    let mut jitter = 0.0;
    loop {
        let mut hj = h.clone();
        for i in 0..p {
            hj[(i, i)] += jitter;
        }
        if let Some(ch) = hj.cholesky() {
            return ch.solve(g);
        }
        jitter = if jitter == 0.0 { 1e-12 } else { jitter * 10.0 };
    }
}

#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

// ---------------------------------------------------------------------------
// Kernel (Nadaraya–Watson) conditional CDF

/// `F̂(y|x) = Σ k(x,xᵢ) 1{yᵢ ≤ y} / Σ k(x,xᵢ)` with an RBF kernel
/// `k(x,x') = exp(-‖x-x'‖² / (2h²))`.
#[derive(Clone, PartialEq)]
pub struct KernelCcdf {
    arm: Arm,
    bandwidth: f64,
    d: usize,
    /// Training outcomes, ascending.
    ys: Vec<f64>,
    /// Covariates aligned with `ys`, row-major.
    xs: Vec<f64>,
}

impl fmt::Debug for KernelCcdf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KernelCcdf")
            .field("arm", &self.arm)
            .field("bandwidth", &self.bandwidth)
            .field("points", &self.ys.len())
            .finish()
    }
}

impl KernelCcdf {
    pub fn new(arm: Arm, bandwidth: f64, d: usize, points: Vec<(f64, Vec<f64>)>) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::invalid(format!("bandwidth must be positive, got {bandwidth}")));
        }
        if points.is_empty() {
            return Err(Error::EmptyArm(arm as u8));
        }
        let mut points = points;
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut ys = Vec::with_capacity(points.len());
        let mut xs = Vec::with_capacity(points.len() * d);
        for (y, x) in points {
            if x.len() != d {
                return Err(Error::DimensionMismatch {
                    context: "kernel CCDF training point",
                    expected: d,
                    got: x.len(),
                });
            }
            ys.push(y);
            xs.extend_from_slice(&x);
        }
        Ok(KernelCcdf { arm, bandwidth, d, ys, xs })
    }

    pub fn arm(&self) -> Arm {
        self.arm
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn with_bandwidth(&self, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::invalid(format!("bandwidth must be positive, got {bandwidth}")));
        }
        Ok(KernelCcdf { bandwidth, ..self.clone() })
    }

    /// Normalised kernel weights of the training points at `x`, aligned with
    /// the sorted outcomes. Computed in log space so that far-away queries do
    /// not underflow to 0/0.
    pub fn weights(&self, x: &[f64]) -> Vec<f64> {
        let inv = 1.0 / (2.0 * self.bandwidth * self.bandwidth);
        let mut logw: Vec<f64> = self
            .xs
            .chunks_exact(self.d.max(1))
            .take(self.ys.len())
            .map(|xi| {
                if self.d == 0 {
                    return 0.0;
                }
                let sq: f64 = xi.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                -sq * inv
            })
            .collect();
        if self.d == 0 {
            logw = vec![0.0; self.ys.len()];
        }
        let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for lw in logw.iter_mut() {
            *lw = (*lw - max).exp();
            total += *lw;
        }
        for w in logw.iter_mut() {
            *w /= total;
        }
        logw
    }

    pub fn condition_weighted(&self, x: &[f64]) -> WeightedEcdf<'_> {
        let w = self.weights(x);
        let mut cum = Vec::with_capacity(w.len());
        let mut acc = 0.0;
        for wi in &w {
            acc += wi;
            cum.push(acc.min(1.0));
        }
        // The top of the distribution is exactly 1 regardless of rounding.
        if let Some(last) = cum.last_mut() {
            *last = 1.0;
        }
        WeightedEcdf { ys: &self.ys, cum }
    }
}

/// A discrete CDF on sorted support points with cumulative weights.
pub struct WeightedEcdf<'a> {
    ys: &'a [f64],
    cum: Vec<f64>,
}

impl WeightedEcdf<'_> {
    pub fn support(&self) -> &[f64] {
        self.ys
    }
}

impl ConditionalCdf for WeightedEcdf<'_> {
    #[inline]
    fn cdf(&self, y: f64) -> f64 {
        let k = self.ys.partition_point(|&v| v <= y);
        if k == 0 {
            0.0
        } else {
            self.cum[k - 1]
        }
    }
}

impl CcdfFn for KernelCcdf {
    fn condition<'a>(&'a self, x: &[f64]) -> Box<dyn ConditionalCdf + 'a> {
        Box::new(self.condition_weighted(x))
    }
}

#[derive(Serialize, Deserialize)]
struct KernelCcdfFile {
    arm: Arm,
    bandwidth: f64,
    points: Vec<KernelPoint>,
}

#[derive(Serialize, Deserialize)]
struct KernelPoint {
    y: f64,
    x: Vec<f64>,
}

impl Serialize for KernelCcdf {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let points = self
            .ys
            .iter()
            .zip(self.xs.chunks_exact(self.d.max(1)))
            .map(|(&y, x)| KernelPoint {
                y,
                x: if self.d == 0 { Vec::new() } else { x.to_vec() },
            })
            .collect();
        KernelCcdfFile {
            arm: self.arm,
            bandwidth: self.bandwidth,
            points,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for KernelCcdf {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let f = KernelCcdfFile::deserialize(de)?;
        let d = f.points.first().map_or(0, |p| p.x.len());
        KernelCcdf::new(
            f.arm,
            f.bandwidth,
            d,
            f.points.into_iter().map(|p| (p.y, p.x)).collect(),
        )
        .map_err(serde::de::Error::custom)
    }
}

/// Kernel CCDF of arm `arm` over the samples of `data`.
pub fn fit_ccdf(data: &Dataset, arm: Arm, bandwidth: f64) -> Result<KernelCcdf> {
    let points: Vec<(f64, Vec<f64>)> = data
        .iter()
        .filter(|s| s.a == arm)
        .map(|s| (s.y, s.x.clone()))
        .collect();
    if points.is_empty() {
        return Err(Error::EmptyArm(arm as u8));
    }
    KernelCcdf::new(arm, bandwidth, data.dim(), points)
}

/// What a bandwidth candidate is scored against.
pub enum BandwidthValidation<'a> {
    /// One-hot indicators `1{yⱼ ≤ t}` of held-out samples.
    Empirical(&'a Dataset),
    /// The true conditional CDF, queried at the covariates of `points`.
    Oracle {
        points: &'a Dataset,
        ccdf: &'a dyn CcdfFn,
    },
}

const SCORE_THRESHOLDS: usize = 32;

/// Grid search for the kernel bandwidth of arm `arm`. Scores are the mean
/// squared discrepancy between `F̂(t|xⱼ)` and the validation target over the
/// held-out points `j` of that arm and a fixed set of outcome thresholds `t`
/// (quantiles of the held-out outcomes). Ties go to the smaller bandwidth.
pub fn select_bandwidth(
    data: &Dataset,
    arm: Arm,
    grid: &[f64],
    validation: BandwidthValidation<'_>,
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::invalid("bandwidth grid is empty"));
    }
    if let Some(h) = grid.iter().find(|h| !(**h > 0.0 && h.is_finite())) {
        return Err(Error::invalid(format!("bandwidth must be positive, got {h}")));
    }
    let base = fit_ccdf(data, arm, grid[0])?;
    let (points, oracle) = match validation {
        BandwidthValidation::Empirical(v) => (v, None),
        BandwidthValidation::Oracle { points, ccdf } => (points, Some(ccdf)),
    };
    let val: Vec<&crate::dataset::Sample> = points.iter().filter(|s| s.a == arm).collect();
    if val.is_empty() {
        return Err(Error::EmptyArm(arm as u8));
    }
    let mut outs: Vec<f64> = val.iter().map(|s| s.y).collect();
    outs.sort_by(f64::total_cmp);
    let k = SCORE_THRESHOLDS.min(outs.len());
    let thresholds: Vec<f64> = (0..k)
        .map(|i| stats::quantile_sorted(&outs, (i as f64 + 0.5) / k as f64))
        .collect();
    // Targets do not depend on the candidate.
    let targets: Vec<Vec<f64>> = val
        .iter()
        .map(|s| match oracle {
            Some(f) => {
                let c = f.condition(&s.x);
                thresholds.iter().map(|&t| c.cdf(t)).collect()
            }
            None => thresholds
                .iter()
                .map(|&t| if s.y <= t { 1.0 } else { 0.0 })
                .collect(),
        })
        .collect();

    let mut best: Option<(f64, f64)> = None;
    for &h in grid {
        let model = base.with_bandwidth(h)?;
        let mut score = 0.0;
        for (s, tg) in val.iter().zip(&targets) {
            let c = model.condition_weighted(&s.x);
            for (&t, &target) in thresholds.iter().zip(tg) {
                let e = c.cdf(t) - target;
                score += e * e;
            }
        }
        score /= (val.len() * thresholds.len()) as f64;
        best = match best {
            Some((bh, bs)) if bs < score || (bs == score && bh <= h) => Some((bh, bs)),
            _ => Some((h, score)),
        };
    }
    Ok(best.expect("grid nonempty").0)
}

// ---------------------------------------------------------------------------
// Oracle nuisances for the Gaussian simulation designs

#[derive(Debug, Clone)]
pub struct OraclePropensity {
    dgp: Arc<DgpSpec>,
    clip: f64,
}

impl PropensityFn for OraclePropensity {
    fn eval(&self, x: &[f64]) -> f64 {
        self.dgp.propensity(x).clamp(self.clip, 1.0 - self.clip)
    }
}

#[derive(Debug, Clone)]
pub struct GaussianCcdf {
    dgp: Arc<DgpSpec>,
    arm: Arm,
}

pub struct GaussianConditional {
    pub mean: f64,
    pub sd: f64,
}

impl ConditionalCdf for GaussianConditional {
    #[inline]
    fn cdf(&self, y: f64) -> f64 {
        normal_cdf((y - self.mean) / self.sd)
    }
}

impl GaussianCcdf {
    pub fn new(dgp: Arc<DgpSpec>, arm: Arm) -> Self {
        GaussianCcdf { dgp, arm }
    }

    pub fn conditional(&self, x: &[f64]) -> GaussianConditional {
        GaussianConditional {
            mean: self.dgp.mean(self.arm, x),
            sd: self.dgp.sigma(self.arm),
        }
    }
}

impl CcdfFn for GaussianCcdf {
    fn condition<'a>(&'a self, x: &[f64]) -> Box<dyn ConditionalCdf + 'a> {
        Box::new(self.conditional(x))
    }
}

// ---------------------------------------------------------------------------
// Nuisance sets and logit-scale perturbation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Provenance {
    Fitted,
    Oracle,
    Perturbed { level: f64, seed: u64, base: PerturbBase },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbBase {
    Fitted,
    Oracle,
}

impl Provenance {
    pub fn label(&self) -> String {
        match self {
            Provenance::Fitted => "fitted".into(),
            Provenance::Oracle => "oracle".into(),
            Provenance::Perturbed { level, base, .. } => {
                let b = match base {
                    PerturbBase::Fitted => "fitted",
                    PerturbBase::Oracle => "oracle",
                };
                format!("perturbed-{b}@{level}")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuisanceProvenance {
    pub propensity: Provenance,
    pub ccdf0: Provenance,
    pub ccdf1: Provenance,
}

impl NuisanceProvenance {
    pub fn uniform(p: Provenance) -> Self {
        NuisanceProvenance {
            propensity: p,
            ccdf0: p,
            ccdf1: p,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NuisanceSet {
    pub propensity: Arc<dyn PropensityFn>,
    pub ccdf0: Arc<dyn CcdfFn>,
    pub ccdf1: Arc<dyn CcdfFn>,
    pub provenance: NuisanceProvenance,
}

impl NuisanceSet {
    pub fn ccdf(&self, arm: Arm) -> &Arc<dyn CcdfFn> {
        match arm {
            Arm::Control => &self.ccdf0,
            Arm::Treated => &self.ccdf1,
        }
    }

    /// Checked propensity: errors when the value is not strictly inside (0, 1).
    pub fn propensity_at(&self, x: &[f64]) -> Result<f64> {
        let p = self.propensity.eval(x);
        if p > 0.0 && p < 1.0 {
            Ok(p)
        } else {
            Err(Error::InvalidPropensity(p))
        }
    }
}

/// Closed-form nuisances of a Gaussian simulation design; the propensity is
/// clipped to `[clip, 1 - clip]`.
pub fn oracle_nuisances(dgp: &DgpSpec, clip: f64) -> NuisanceSet {
    let dgp = Arc::new(dgp.clone());
    NuisanceSet {
        propensity: Arc::new(OraclePropensity {
            dgp: dgp.clone(),
            clip,
        }),
        ccdf0: Arc::new(GaussianCcdf::new(dgp.clone(), Arm::Control)),
        ccdf1: Arc::new(GaussianCcdf::new(dgp, Arm::Treated)),
        provenance: NuisanceProvenance::uniform(Provenance::Oracle),
    }
}

/// Fitted nuisances with fixed hyperparameters (no search).
pub fn fit_nuisances(data: &Dataset, l2: f64, clip: f64, bandwidths: (f64, f64)) -> Result<NuisanceSet> {
    let propensity = fit_propensity(data, l2, clip)?;
    let ccdf0 = fit_ccdf(data, Arm::Control, bandwidths.0)?;
    let ccdf1 = fit_ccdf(data, Arm::Treated, bandwidths.1)?;
    Ok(NuisanceSet {
        propensity: Arc::new(propensity),
        ccdf0: Arc::new(ccdf0),
        ccdf1: Arc::new(ccdf1),
        provenance: NuisanceProvenance::uniform(Provenance::Fitted),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTarget {
    Propensity,
    Ccdf0,
    Ccdf1,
}

/// Biased random noise on the logit scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitNoise {
    pub level: f64,
    pub bias: f64,
    pub seed: u64,
    pub targets: Vec<NoiseTarget>,
    /// Location/scale used to standardise outcomes inside the CCDF noise
    /// field, per arm `[control, treated]`.
    #[serde(default = "unit_scales")]
    pub outcome_scale: [(f64, f64); 2],
}

fn unit_scales() -> [(f64, f64); 2] {
    [(0.0, 1.0), (0.0, 1.0)]
}

impl LogitNoise {
    pub fn new(level: f64, bias: f64, seed: u64, targets: Vec<NoiseTarget>) -> Self {
        LogitNoise {
            level,
            bias,
            seed,
            targets,
            outcome_scale: unit_scales(),
        }
    }

    pub fn all_targets() -> Vec<NoiseTarget> {
        vec![NoiseTarget::Propensity, NoiseTarget::Ccdf0, NoiseTarget::Ccdf1]
    }
}

/// `sigmoid(logit(p) + bias·level + level·ε)`; 0 and 1 are fixed points.
#[inline]
pub fn perturb_value(p: f64, bias: f64, level: f64, eps: f64) -> f64 {
    if level == 0.0 || p <= 0.0 || p >= 1.0 {
        return p;
    }
    sigmoid(logit(p) + level * (bias + eps))
}

/// Smooth deterministic noise field: `sin(w·x + b)` in the covariates plus,
/// for CCDF targets, a bounded strictly increasing term `tanh(u·ỹ)` in the
/// standardised outcome. The result lies in `[-1, 1]`.
#[derive(Debug, Clone)]
struct NoiseField {
    w: Vec<f64>,
    phase: f64,
    slope: f64,
    center: f64,
    scale: f64,
}

impl NoiseField {
    fn draw(seed: u64, target: NoiseTarget, d: usize, center: f64, scale: f64) -> Self {
        let mut r = rng::rng_from(seed, &[0xF1E1D, target as u64]);
        let sd = 1.0 / (d.max(1) as f64).sqrt();
        let w = (0..d).map(|_| sd * r.sample::<f64, _>(StandardNormal)).collect();
        let phase = r.random::<f64>() * TAU;
        let slope = 0.5 + r.random::<f64>();
        NoiseField {
            w,
            phase,
            slope,
            center,
            scale: if scale > 0.0 { scale } else { 1.0 },
        }
    }

    fn covariate_part(&self, x: &[f64]) -> f64 {
        (stats::dot(&self.w, x) + self.phase).sin()
    }

    fn outcome_part(&self, y: f64) -> f64 {
        (self.slope * (y - self.center) / self.scale).tanh()
    }
}

#[derive(Debug)]
struct PerturbedPropensity {
    inner: Arc<dyn PropensityFn>,
    field: NoiseField,
    level: f64,
    bias: f64,
    clip: f64,
}

impl PropensityFn for PerturbedPropensity {
    fn eval(&self, x: &[f64]) -> f64 {
        let p = self.inner.eval(x);
        if self.level == 0.0 {
            return p;
        }
        perturb_value(p, self.bias, self.level, self.field.covariate_part(x))
            .clamp(self.clip, 1.0 - self.clip)
    }
}

#[derive(Debug)]
struct PerturbedCcdf {
    inner: Arc<dyn CcdfFn>,
    field: NoiseField,
    level: f64,
    bias: f64,
}

struct PerturbedConditional<'a> {
    inner: Box<dyn ConditionalCdf + 'a>,
    field: &'a NoiseField,
    x_part: f64,
    level: f64,
    bias: f64,
}

impl ConditionalCdf for PerturbedConditional<'_> {
    fn cdf(&self, y: f64) -> f64 {
        let p = self.inner.cdf(y);
        if self.level == 0.0 {
            return p;
        }
        let eps = 0.5 * (self.x_part + self.field.outcome_part(y));
        perturb_value(p, self.bias, self.level, eps)
    }
}

impl CcdfFn for PerturbedCcdf {
    fn condition<'a>(&'a self, x: &[f64]) -> Box<dyn ConditionalCdf + 'a> {
        Box::new(PerturbedConditional {
            inner: self.inner.condition(x),
            field: &self.field,
            x_part: self.field.covariate_part(x),
            level: self.level,
            bias: self.bias,
        })
    }
}

/// Applies `noise` to the targeted nuisances; the rest pass through.
/// `d` is the covariate dimension and `clip` re-bounds the perturbed
/// propensity away from {0, 1}.
pub fn perturb(nuisances: &NuisanceSet, noise: &LogitNoise, d: usize, clip: f64) -> NuisanceSet {
    let mut out = nuisances.clone();
    let tagged = |p: Provenance| match p {
        Provenance::Oracle => Provenance::Perturbed {
            level: noise.level,
            seed: noise.seed,
            base: PerturbBase::Oracle,
        },
        Provenance::Fitted => Provenance::Perturbed {
            level: noise.level,
            seed: noise.seed,
            base: PerturbBase::Fitted,
        },
        Provenance::Perturbed { base, .. } => Provenance::Perturbed {
            level: noise.level,
            seed: noise.seed,
            base,
        },
    };
    for &t in &noise.targets {
        match t {
            NoiseTarget::Propensity => {
                out.propensity = Arc::new(PerturbedPropensity {
                    inner: nuisances.propensity.clone(),
                    field: NoiseField::draw(noise.seed, t, d, 0.0, 1.0),
                    level: noise.level,
                    bias: noise.bias,
                    clip,
                });
                out.provenance.propensity = tagged(nuisances.provenance.propensity);
            }
            NoiseTarget::Ccdf0 | NoiseTarget::Ccdf1 => {
                let (arm_idx, inner) = if t == NoiseTarget::Ccdf0 {
                    (0, nuisances.ccdf0.clone())
                } else {
                    (1, nuisances.ccdf1.clone())
                };
                let (c, s) = noise.outcome_scale[arm_idx];
                let wrapped: Arc<dyn CcdfFn> = Arc::new(PerturbedCcdf {
                    inner,
                    field: NoiseField::draw(noise.seed, t, d, c, s),
                    level: noise.level,
                    bias: noise.bias,
                });
                if arm_idx == 0 {
                    out.ccdf0 = wrapped;
                    out.provenance.ccdf0 = tagged(nuisances.provenance.ccdf0);
                } else {
                    out.ccdf1 = wrapped;
                    out.provenance.ccdf1 = tagged(nuisances.provenance.ccdf1);
                }
            }
        }
    }
    out
}
