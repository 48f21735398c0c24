//! Replicated simulation experiments over one varying axis.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dgp::DgpSpec;
use crate::baselines::{s_learner_cqc, DrContrastRegression, GridSpec, DEFAULT_GRID_POINTS};
use crate::dataset::{split_half, Arm, Dataset};
use crate::error::{Error, Result};
use crate::model::{Activation, CqcFunction, CqcModel, FeatureMap, LinearCqc, MlpCqc};
use crate::nuisance::{
    fit_ccdf, fit_propensity, oracle_nuisances, perturb, select_bandwidth, BandwidthValidation, LogitNoise,
    NoiseTarget, NuisanceProvenance, NuisanceSet, Provenance, DEFAULT_CLIP,
};
use crate::objective::{GradKind, Y0Sampler, Y0Source};
use crate::optimizer::{fit_adam, select_lr, AdamConfig, BatchSpec};
use crate::rng;
use crate::stats;

// Stream tags for seed derivation.
const TAG_DATA: u64 = 1;
const TAG_DIRECTION: u64 = 2;
const TAG_EVAL: u64 = 3;
const TAG_BW_VAL: u64 = 4;
const TAG_NOISE: u64 = 5;
const TAG_FIT: u64 = 6;
const TAG_INV_VAL: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    DrLin,
    DrNn,
    Ipw,
    InvertDr,
    SLearner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceMode {
    Oracle,
    Estimated,
}

/// A method together with the source of its nuisances, written
/// `dr_lin:oracle`, `invert_dr:estimated`, ...
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MethodTag {
    pub kind: MethodKind,
    pub mode: NuisanceMode,
}

impl MethodTag {
    pub fn new(kind: MethodKind, mode: NuisanceMode) -> Self {
        MethodTag { kind, mode }
    }
}

impl fmt::Display for MethodTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self.kind {
            MethodKind::DrLin => "dr_lin",
            MethodKind::DrNn => "dr_nn",
            MethodKind::Ipw => "ipw",
            MethodKind::InvertDr => "invert_dr",
            MethodKind::SLearner => "s_learner",
        };
        let m = match self.mode {
            NuisanceMode::Oracle => "oracle",
            NuisanceMode::Estimated => "estimated",
        };
        write!(f, "{k}:{m}")
    }
}

impl FromStr for MethodTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (k, m) = s.split_once(':').unwrap_or((s, "estimated"));
        let kind = match k {
            "dr_lin" => MethodKind::DrLin,
            "dr_nn" => MethodKind::DrNn,
            "ipw" => MethodKind::Ipw,
            "invert_dr" | "invert" => MethodKind::InvertDr,
            "s_learner" => MethodKind::SLearner,
            other => {
                return Err(Error::invalid(format!(
                    "unknown method `{other}`; expected one of dr_lin, dr_nn, ipw, invert_dr, s_learner"
                )))
            }
        };
        let mode = match m {
            "oracle" => NuisanceMode::Oracle,
            "estimated" | "est" => NuisanceMode::Estimated,
            other => return Err(Error::invalid(format!("unknown nuisance mode `{other}`"))),
        };
        Ok(MethodTag { kind, mode })
    }
}

impl Serialize for MethodTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MethodTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Axis {
    Slope { gammas: Vec<f64> },
    NuisanceNoise { levels: Vec<f64>, targets: Vec<NoiseTarget>, bias: f64 },
    SampleSize { ns: Vec<usize> },
    LrSweep { lrs: Vec<f64> },
    Y0SamplerSweep { samplers: Vec<Y0Sampler> },
}

impl Axis {
    pub fn name(&self) -> &'static str {
        match self {
            Axis::Slope { .. } => "slope",
            Axis::NuisanceNoise { .. } => "nuisance_noise",
            Axis::SampleSize { .. } => "sample_size",
            Axis::LrSweep { .. } => "lr",
            Axis::Y0SamplerSweep { .. } => "y0_sampler",
        }
    }

    fn len(&self) -> usize {
        match self {
            Axis::Slope { gammas } => gammas.len(),
            Axis::NuisanceNoise { levels, .. } => levels.len(),
            Axis::SampleSize { ns } => ns.len(),
            Axis::LrSweep { lrs } => lrs.len(),
            Axis::Y0SamplerSweep { samplers } => samplers.len(),
        }
    }

    fn label(&self, k: usize) -> String {
        match self {
            Axis::Slope { gammas } => format!("{}", gammas[k]),
            Axis::NuisanceNoise { levels, .. } => format!("{}", levels[k]),
            Axis::SampleSize { ns } => format!("{}", ns[k]),
            Axis::LrSweep { lrs } => format!("{}", lrs[k]),
            Axis::Y0SamplerSweep { samplers } => samplers[k].label().to_string(),
        }
    }
}

/// Which design family the experiment draws from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignChoice {
    /// Registry name: `sin_linear`, `cos_linear` or `fig1`.
    pub name: String,
    pub d: usize,
    pub gamma: f64,
}

impl DesignChoice {
    fn build(&self, gamma: f64, direction_seed: u64) -> Result<DgpSpec> {
        DgpSpec::by_name(&self.name, gamma, self.d, direction_seed)
    }
}

/// Knobs shared by every cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub n: usize,
    pub y0_sampler: Y0Sampler,
    pub lr: f64,
    pub iters: usize,
    pub lr_grid: Option<Vec<f64>>,
    pub lr_decay: Option<f64>,
    pub clip: f64,
    /// Propensity penalty; `None` uses `1/n₁`.
    pub l2: Option<f64>,
    /// CCDF bandwidth candidates, multiplied by `√d`.
    pub bandwidth_grid: Vec<f64>,
    pub bandwidth_validation_points: usize,
    /// Inversion bandwidth candidates, multiplied by `√d`.
    pub inversion_bandwidth_grid: Vec<f64>,
    pub inversion_validation_points: usize,
    pub grid_points: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub truncate: bool,
    pub timing: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            n: 500,
            y0_sampler: Y0Sampler::Unconditional,
            lr: 0.1,
            iters: 1000,
            lr_grid: None,
            lr_decay: None,
            clip: DEFAULT_CLIP,
            l2: None,
            bandwidth_grid: vec![0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0],
            bandwidth_validation_points: 400,
            inversion_bandwidth_grid: vec![0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0],
            inversion_validation_points: 200,
            grid_points: DEFAULT_GRID_POINTS,
            hidden: vec![20, 20],
            activation: Activation::Relu,
            truncate: false,
            timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    pub design: DesignChoice,
    pub axis: Axis,
    pub methods: Vec<MethodTag>,
    pub replications: usize,
    pub base_seed: u64,
    pub eval_points: usize,
    pub settings: Settings,
}

impl Default for ExperimentPlan {
    /// Slope sweep on the ten-dimensional sine design.
    fn default() -> Self {
        ExperimentPlan {
            design: DesignChoice {
                name: "sin_linear".into(),
                d: 10,
                gamma: 2.0,
            },
            axis: Axis::Slope {
                gammas: vec![0.0, 2.0, 4.0, 6.0],
            },
            methods: vec![
                MethodTag::new(MethodKind::DrLin, NuisanceMode::Estimated),
                MethodTag::new(MethodKind::InvertDr, NuisanceMode::Estimated),
            ],
            replications: 100,
            base_seed: 0,
            eval_points: 2000,
            settings: Settings::default(),
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::invalid("replications must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("no methods selected"));
        }
        if self.axis.len() == 0 {
            return Err(Error::invalid("axis has no values"));
        }
        if self.eval_points == 0 {
            return Err(Error::invalid("eval_points must be at least 1"));
        }
        if let Axis::SampleSize { ns } = &self.axis {
            if ns.iter().any(|&n| n < 4) {
                return Err(Error::invalid("sample sizes must be at least 4"));
            }
        } else if self.settings.n < 4 {
            return Err(Error::invalid("sample size must be at least 4"));
        }
        if let Axis::NuisanceNoise { levels, targets, .. } = &self.axis {
            if levels.iter().any(|l| !(*l >= 0.0)) || targets.is_empty() {
                return Err(Error::invalid("noise levels must be nonnegative with at least one target"));
            }
        }
        if self.settings.bandwidth_grid.is_empty() || self.settings.inversion_bandwidth_grid.is_empty() {
            return Err(Error::invalid("bandwidth grids must be nonempty"));
        }
        if let Some(g) = &self.settings.lr_grid {
            if g.is_empty() || g.iter().any(|lr| !(*lr > 0.0 && lr.is_finite())) {
                return Err(Error::invalid("learning-rate grid must be nonempty and positive"));
            }
        }
        // The design must be constructible.
        self.design.build(self.design.gamma, 0)?;
        Ok(())
    }
}

/// One row of the results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub axis: String,
    pub axis_value: String,
    pub method: MethodTag,
    pub replication: usize,
    /// NaN when the cell failed.
    pub mae: f64,
    pub seconds: Option<f64>,
    pub propensity: String,
    pub ccdf: String,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub axis: String,
    pub axis_value: String,
    pub method: MethodTag,
    pub maes: Vec<f64>,
    pub mean: f64,
    /// Half-width `1.96·sd/√R`; NaN when fewer than two replications succeeded.
    pub ci: f64,
    pub truncated: bool,
    pub seconds: Option<f64>,
    pub failures: usize,
}

impl MetricsRecord {
    pub fn lower(&self) -> f64 {
        self.mean - self.ci
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.ci
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub records: Vec<MetricsRecord>,
}

impl ExperimentOutput {
    pub fn record(&self, axis_value: &str, method: MethodTag) -> Option<&MetricsRecord> {
        self.records
            .iter()
            .find(|r| r.axis_value == axis_value && r.method == method)
    }
}

/// Mean and `1.96·sd/√R` half-width, optionally after removing the
/// largest and smallest 2.5% of values.
pub fn summarize(values: &[f64], truncate: bool) -> (f64, f64) {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    if truncate {
        v.sort_by(f64::total_cmp);
        let k = (0.025 * v.len() as f64).floor() as usize;
        v = v[k..v.len() - k].to_vec();
    }
    let mean = stats::mean(&v);
    let ci = if v.len() < 2 {
        f64::NAN
    } else {
        1.96 * stats::sample_sd(&v) / (v.len() as f64).sqrt()
    };
    (mean, ci)
}

/// Fresh evaluation pairs: `x ~ N(0, I)` and `y₀` from the marginal law of
/// `Y | A = 0` (rejection on the treatment draw), independent of `x`.
pub fn eval_points(dgp: &DgpSpec, count: usize, seed: u64) -> Vec<(f64, Vec<f64>)> {
    let mut r = rng::rng_from(seed, &[0xE7A1]);
    (0..count)
        .map(|_| {
            let x = dgp.draw_x(&mut r);
            let y0 = loop {
                let s = dgp.draw_sample(&mut r);
                if s.a == Arm::Control {
                    break s.y;
                }
            };
            (y0, x)
        })
        .collect()
}

/// Mean absolute error against the design's true CQC.
pub fn mae(estimate: &dyn CqcFunction, dgp: &DgpSpec, points: &[(f64, Vec<f64>)]) -> f64 {
    let errs: Vec<f64> = points
        .iter()
        .map(|(y0, x)| (estimate.cqc(*y0, x) - dgp.cqc(*y0, x)).abs())
        .collect();
    stats::mean(&errs)
}

/// Closed-form `ℓ(θ, y₀, x) = ∫_{c*}^{c} (F₁(t|x) − F₀(y₀|x)) dt` for the
/// Gaussian designs: `σ₁[G(u_c) − G(u*)] − F₀(y₀|x)(c − c*)` with
/// `G(u) = uΦ(u) + φ(u)` and `u = (t − μ₁)/σ₁`.
pub fn gaussian_pointwise_loss(dgp: &DgpSpec, c: f64, y0: f64, x: &[f64]) -> f64 {
    let mu1 = dgp.mean(Arm::Treated, x);
    let s1 = dgp.sigma1;
    let cs = dgp.cqc(y0, x);
    let f0 = stats::normal_cdf((y0 - dgp.mean(Arm::Control, x)) / dgp.sigma0);
    s1 * (stats::normal_cdf_antiderivative((c - mu1) / s1) - stats::normal_cdf_antiderivative((cs - mu1) / s1))
        - f0 * (c - cs)
}

/// Population excess loss `E[ℓ(θ, Y₀, X)]` over the given pairs.
pub fn population_excess_loss(model: &dyn CqcFunction, dgp: &DgpSpec, points: &[(f64, Vec<f64>)]) -> f64 {
    let v: Vec<f64> = points
        .iter()
        .map(|(y0, x)| gaussian_pointwise_loss(dgp, model.cqc(*y0, x), *y0, x))
        .collect();
    stats::mean(&v)
}

struct CellSetting {
    gamma: f64,
    n: usize,
    noise: Option<(f64, Vec<NoiseTarget>, f64)>,
    lr: f64,
    sampler: Y0Sampler,
}

fn cell_setting(plan: &ExperimentPlan, k: usize) -> CellSetting {
    let s = &plan.settings;
    let mut c = CellSetting {
        gamma: plan.design.gamma,
        n: s.n,
        noise: None,
        lr: s.lr,
        sampler: s.y0_sampler.clone(),
    };
    match &plan.axis {
        Axis::Slope { gammas } => c.gamma = gammas[k],
        Axis::NuisanceNoise { levels, targets, bias } => c.noise = Some((levels[k], targets.clone(), *bias)),
        Axis::SampleSize { ns } => c.n = ns[k],
        Axis::LrSweep { lrs } => c.lr = lrs[k],
        Axis::Y0SamplerSweep { samplers } => c.sampler = samplers[k].clone(),
    }
    c
}

fn provenance_label(p: &NuisanceProvenance) -> (String, String) {
    let ccdf = if p.ccdf0 == p.ccdf1 {
        p.ccdf0.label()
    } else {
        format!("{}|{}", p.ccdf0.label(), p.ccdf1.label())
    };
    (p.propensity.label(), ccdf)
}

/// Estimated nuisances on `train`, with CCDF bandwidths tuned against the
/// true CCDFs on a fresh validation sample.
pub fn fit_estimated_nuisances(
    dgp: &DgpSpec,
    train: &Dataset,
    settings: &Settings,
    validation_seed: u64,
) -> Result<NuisanceSet> {
    let l2 = settings.l2.unwrap_or(1.0 / train.len() as f64);
    let propensity = fit_propensity(train, l2, settings.clip)?;
    let oracle = oracle_nuisances(dgp, settings.clip);
    let val = dgp.generate(settings.bandwidth_validation_points.max(2), validation_seed)?;
    let scale = (dgp.d as f64).sqrt();
    let grid: Vec<f64> = settings.bandwidth_grid.iter().map(|h| h * scale).collect();
    let fit_arm = |arm: Arm| -> Result<_> {
        let truth = oracle.ccdf(arm).clone();
        let h = select_bandwidth(
            train,
            arm,
            &grid,
            BandwidthValidation::Oracle {
                points: &val,
                ccdf: &*truth,
            },
        )?;
        fit_ccdf(train, arm, h)
    };
    let ccdf0 = fit_arm(Arm::Control)?;
    let ccdf1 = fit_arm(Arm::Treated)?;
    Ok(NuisanceSet {
        propensity: Arc::new(propensity),
        ccdf0: Arc::new(ccdf0),
        ccdf1: Arc::new(ccdf1),
        provenance: NuisanceProvenance::uniform(Provenance::Fitted),
    })
}

/// Perturbs the targeted nuisances of `base`; untargeted ones are replaced
/// by the oracle when only some targets are perturbed.
fn noisy_nuisances(
    base: &NuisanceSet,
    oracle: &NuisanceSet,
    data: &Dataset,
    level: f64,
    targets: &[NoiseTarget],
    bias: f64,
    seed: u64,
    d: usize,
    clip: f64,
) -> NuisanceSet {
    let mut start = base.clone();
    let all = targets.contains(&NoiseTarget::Propensity)
        && targets.contains(&NoiseTarget::Ccdf0)
        && targets.contains(&NoiseTarget::Ccdf1);
    if !all {
        if !targets.contains(&NoiseTarget::Propensity) {
            start.propensity = oracle.propensity.clone();
            start.provenance.propensity = Provenance::Oracle;
        }
        if !targets.contains(&NoiseTarget::Ccdf0) {
            start.ccdf0 = oracle.ccdf0.clone();
            start.provenance.ccdf0 = Provenance::Oracle;
        }
        if !targets.contains(&NoiseTarget::Ccdf1) {
            start.ccdf1 = oracle.ccdf1.clone();
            start.provenance.ccdf1 = Provenance::Oracle;
        }
    }
    let mut noise = LogitNoise::new(level, bias, seed, targets.to_vec());
    for (k, arm) in [Arm::Control, Arm::Treated].into_iter().enumerate() {
        let ys = data.outcomes(arm);
        if ys.len() >= 2 {
            noise.outcome_scale[k] = (stats::mean(&ys), stats::sample_sd(&ys));
        }
    }
    perturb(&start, &noise, d, clip)
}

struct CellOutcome {
    method: MethodTag,
    mae: Result<f64>,
    seconds: f64,
    provenance: NuisanceProvenance,
}

#[allow(clippy::too_many_arguments)]
fn run_method(
    plan: &ExperimentPlan,
    tag: MethodTag,
    dgp: &DgpSpec,
    data: &Dataset,
    fit_data: &Dataset,
    nuisances: &NuisanceSet,
    setting: &CellSetting,
    eval: &[(f64, Vec<f64>)],
    rep: usize,
) -> Result<f64> {
    let s = &plan.settings;
    let fit_seed = rng::derive_seed(plan.base_seed, &[TAG_FIT, rep as u64, tag.kind as u64]);
    match tag.kind {
        MethodKind::DrLin | MethodKind::Ipw | MethodKind::DrNn => {
            let model0 = if tag.kind == MethodKind::DrNn {
                CqcModel::Mlp(MlpCqc::new(dgp.d, &s.hidden, s.activation, fit_seed))
            } else {
                CqcModel::Linear(LinearCqc::zeros(FeatureMap::affine(dgp.d)))
            };
            let untreated = fit_data.outcomes(Arm::Control);
            let src = Y0Source::new(&setting.sampler, &untreated, Some(dgp))?;
            let grad = if tag.kind == MethodKind::Ipw {
                GradKind::Ipw
            } else {
                GradKind::Dr
            };
            let mut cfg = AdamConfig {
                lr: setting.lr,
                iters: s.iters,
                batch: BatchSpec::Full,
                grad,
                seed: fit_seed,
                decay: s.lr_decay,
            };
            if let (Some(grid), false) = (&s.lr_grid, matches!(plan.axis, Axis::LrSweep { .. })) {
                let (lr, _) = select_lr(&model0, nuisances, fit_data, &src, &cfg, grid, 0.05)?;
                cfg.lr = lr;
            }
            let res = fit_adam(&model0, nuisances, fit_data, &src, &cfg, None)?;
            let model = res.estimate(&model0);
            Ok(mae(&model, dgp, eval))
        }
        MethodKind::SLearner => {
            let grid = GridSpec::from_outcomes(&data.iter().map(|z| z.y).collect::<Vec<_>>(), s.grid_points)?;
            let f = |y0: f64, x: &[f64]| {
                s_learner_cqc(&*nuisances.ccdf0, &*nuisances.ccdf1, y0, x, &grid).unwrap_or(f64::NAN)
            };
            Ok(mae(&f, dgp, eval))
        }
        MethodKind::InvertDr => {
            let grid = GridSpec::from_outcomes(&data.iter().map(|z| z.y).collect::<Vec<_>>(), s.grid_points)?;
            let reg = DrContrastRegression::new(nuisances, fit_data, grid)?;
            let val_seed = rng::derive_seed(plan.base_seed, &[TAG_INV_VAL, rep as u64]);
            let val = eval_points(dgp, s.inversion_validation_points.max(1), val_seed);
            let scale = (dgp.d as f64).sqrt();
            let scores: Vec<f64> = s
                .inversion_bandwidth_grid
                .iter()
                .map(|h| {
                    let f = |y0: f64, x: &[f64]| reg.invert(y0, x, h * scale);
                    mae(&f, dgp, &val)
                })
                .collect();
            let best = crate::optimizer::argmin_score(&scores).expect("nonempty grid");
            let h = s.inversion_bandwidth_grid[best] * scale;
            let f = |y0: f64, x: &[f64]| reg.invert(y0, x, h);
            Ok(mae(&f, dgp, eval))
        }
    }
}

fn run_cell(plan: &ExperimentPlan, k: usize, rep: usize) -> Vec<CellOutcome> {
    let setting = cell_setting(plan, k);
    let failed = |msg: String| -> Vec<CellOutcome> {
        plan.methods
            .iter()
            .map(|&m| CellOutcome {
                method: m,
                mae: Err(Error::invalid(msg.clone())),
                seconds: 0.0,
                provenance: NuisanceProvenance::uniform(Provenance::Oracle),
            })
            .collect()
    };
    let r = rep as u64;
    let dgp = match plan
        .design
        .build(setting.gamma, rng::derive_seed(plan.base_seed, &[TAG_DIRECTION, r]))
    {
        Ok(d) => d,
        Err(e) => return failed(e.to_string()),
    };
    let data = match dgp.generate(setting.n, rng::derive_seed(plan.base_seed, &[TAG_DATA, r])) {
        Ok(d) => d,
        Err(e) => return failed(e.to_string()),
    };
    let split = match split_half(&data, 0, false) {
        Ok(s) => s,
        Err(e) => return failed(e.to_string()),
    };
    let nuis_data = data.subset(&split.nuisance_idx);
    let fit_data = data.subset(&split.fit_idx);
    let eval = eval_points(&dgp, plan.eval_points, rng::derive_seed(plan.base_seed, &[TAG_EVAL, r]));
    let oracle = oracle_nuisances(&dgp, plan.settings.clip);
    let needs_fit = plan.methods.iter().any(|m| m.mode == NuisanceMode::Estimated);
    let estimated = if needs_fit {
        Some(fit_estimated_nuisances(
            &dgp,
            &nuis_data,
            &plan.settings,
            rng::derive_seed(plan.base_seed, &[TAG_BW_VAL, r]),
        ))
    } else {
        None
    };

    plan.methods
        .iter()
        .map(|&tag| {
            let start = Instant::now();
            let base = match tag.mode {
                NuisanceMode::Oracle => Ok(oracle.clone()),
                NuisanceMode::Estimated => match estimated.as_ref().expect("fitted when needed") {
                    Ok(n) => Ok(n.clone()),
                    Err(e) => Err(Error::invalid(format!("nuisance fit failed: {e}"))),
                },
            };
            let nuisances = base.map(|b| match &setting.noise {
                Some((level, targets, bias)) => noisy_nuisances(
                    &b,
                    &oracle,
                    &data,
                    *level,
                    targets,
                    *bias,
                    rng::derive_seed(plan.base_seed, &[TAG_NOISE, r]),
                    dgp.d,
                    plan.settings.clip,
                ),
                None => b,
            });
            let provenance = nuisances
                .as_ref()
                .map(|n| n.provenance)
                .unwrap_or(NuisanceProvenance::uniform(Provenance::Fitted));
            let mae = nuisances.and_then(|n| run_method(plan, tag, &dgp, &data, &fit_data, &n, &setting, &eval, rep));
            let mae = match mae {
                Ok(v) if !v.is_finite() => Err(Error::NonFinite("MAE".into())),
                other => other,
            };
            CellOutcome {
                method: tag,
                mae,
                seconds: start.elapsed().as_secs_f64(),
                provenance,
            }
        })
        .collect()
}

/// Runs every (axis value, replication) cell in parallel on the current
/// rayon pool and aggregates per (axis value, method). Output order follows
/// the plan: axis values, then methods, then replications.
pub fn run_experiment(plan: &ExperimentPlan, progress: Option<&(dyn Fn(&str) + Sync)>) -> Result<ExperimentOutput> {
    plan.validate()?;
    let cells: Vec<(usize, usize)> = (0..plan.axis.len())
        .flat_map(|k| (0..plan.replications).map(move |r| (k, r)))
        .collect();
    let outcomes: Vec<((usize, usize), Vec<CellOutcome>)> = cells
        .par_iter()
        .map(|&(k, r)| {
            let out = run_cell(plan, k, r);
            if let Some(p) = progress {
                p(&format!(
                    "{}={} replication {} done",
                    plan.axis.name(),
                    plan.axis.label(k),
                    r
                ));
            }
            ((k, r), out)
        })
        .collect();

    let axis = plan.axis.name().to_string();
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for k in 0..plan.axis.len() {
        let label = plan.axis.label(k);
        for (mi, &method) in plan.methods.iter().enumerate() {
            let mut maes = Vec::with_capacity(plan.replications);
            let mut secs = 0.0;
            let mut failures = 0;
            for ((ck, r), outs) in &outcomes {
                if *ck != k {
                    continue;
                }
                let o = &outs[mi];
                debug_assert_eq!(o.method, method);
                let (prop, ccdf) = provenance_label(&o.provenance);
                let (mae_v, err) = match &o.mae {
                    Ok(v) => (*v, None),
                    Err(e) => {
                        failures += 1;
                        (f64::NAN, Some(e.to_string()))
                    }
                };
                if err.is_none() {
                    maes.push(mae_v);
                }
                secs += o.seconds;
                rows.push(ResultRow {
                    axis: axis.clone(),
                    axis_value: label.clone(),
                    method,
                    replication: *r,
                    mae: mae_v,
                    seconds: plan.settings.timing.then_some(o.seconds),
                    propensity: prop,
                    ccdf,
                    error: err,
                });
            }
            let (mean, ci) = summarize(&maes, plan.settings.truncate);
            records.push(MetricsRecord {
                axis: axis.clone(),
                axis_value: label.clone(),
                method,
                maes,
                mean,
                ci,
                truncated: plan.settings.truncate,
                seconds: plan.settings.timing.then_some(secs),
                failures,
            });
        }
    }
    Ok(ExperimentOutput { rows, records })
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:.17e}")
    }
}

/// `axis,axis_value,method,replication,mae,seconds,propensity,ccdf`.
pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from("axis,axis_value,method,replication,mae,seconds,propensity,ccdf\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.axis,
            r.axis_value,
            r.method,
            r.replication,
            fmt_f64(r.mae),
            r.seconds.map(|s| format!("{s:.6}")).unwrap_or_default(),
            r.propensity,
            r.ccdf,
        ));
    }
    out
}

/// `axis,axis_value,method,replications,failures,mean,ci,aggregation`.
pub fn aggregate_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from("axis,axis_value,method,replications,failures,mean,ci,aggregation\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.axis,
            r.axis_value,
            r.method,
            r.maes.len() + r.failures,
            r.failures,
            fmt_f64(r.mean),
            fmt_f64(r.ci),
            if r.truncated { "truncated_2.5" } else { "mean" },
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_plan(axis: Axis, methods: &[&str], reps: usize) -> ExperimentPlan {
        ExperimentPlan {
            design: DesignChoice {
                name: "cos_linear".into(),
                d: 1,
                gamma: 2.0,
            },
            axis,
            methods: methods.iter().map(|m| m.parse().unwrap()).collect(),
            replications: reps,
            base_seed: 42,
            eval_points: 200,
            settings: Settings {
                n: 200,
                iters: 100,
                grid_points: 201,
                ..Settings::default()
            },
        }
    }

    #[test]
    fn method_tags_roundtrip() {
        for s in ["dr_lin:oracle", "dr_nn:estimated", "ipw:oracle", "invert_dr:estimated", "s_learner:oracle"] {
            assert_eq!(s.parse::<MethodTag>().unwrap().to_string(), s);
        }
        assert!("foo:oracle".parse::<MethodTag>().is_err());
    }

    #[test]
    fn single_replication_gives_nan_ci() {
        let (m, ci) = summarize(&[0.3], false);
        assert_eq!(m, 0.3);
        assert!(ci.is_nan());
        let (_, ci) = summarize(&[1.0, 2.0, 3.0], false);
        assert!((ci - 1.96 * 1.0 / 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn truncation_drops_extremes() {
        let mut v: Vec<f64> = (0..40).map(|i| i as f64).collect();
        v.push(1e9);
        let (m, _) = summarize(&v, true);
        assert!(m < 40.0);
    }

    #[test]
    fn mae_identities() {
        let dgp = DgpSpec::cos_linear(1.0);
        let pts = eval_points(&dgp, 100, 3);
        let exact = |y0: f64, x: &[f64]| dgp.cqc(y0, x);
        assert_eq!(mae(&exact, &dgp, &pts), 0.0);
        let off = |y0: f64, x: &[f64]| dgp.cqc(y0, x) + 0.7;
        assert!((mae(&off, &dgp, &pts) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn zero_model_mae_matches_direct_simulation() {
        let dgp = DgpSpec::cos_linear(2.0);
        let pts = eval_points(&dgp, 20_000, 5);
        let zero = |_: f64, _: &[f64]| 0.0;
        let m = mae(&zero, &dgp, &pts);
        // Independent simulation of E|2Y₀ + 2X| with Y₀ ~ Y | A=0.
        let mut r = rng::rng_from(99, &[]);
        let mut vals = Vec::new();
        while vals.len() < 20_000 {
            let s = dgp.draw_sample(&mut r);
            if s.a == Arm::Control {
                let x: f64 = rand::Rng::sample(&mut r, rand_distr::StandardNormal);
                vals.push((2.0 * s.y + 2.0 * x).abs());
            }
        }
        let se = (stats::std_error(&vals).powi(2) * 2.0).sqrt();
        assert!((m - stats::mean(&vals)).abs() < 3.0 * se);
    }

    #[test]
    fn gaussian_loss_matches_quadrature() {
        use crate::nuisance::GaussianConditional;
        use crate::objective::pointwise_loss;
        let dgp = DgpSpec::cos_linear(1.3);
        for &(c, y0, x) in &[(0.0, 0.5, 0.2), (4.0, -1.0, 1.0), (-3.0, 2.0, -0.7)] {
            let f1 = GaussianConditional {
                mean: dgp.mean(Arm::Treated, &[x]),
                sd: dgp.sigma1,
            };
            let f0 = stats::normal_cdf(y0 - dgp.mean(Arm::Control, &[x]));
            let q = pointwise_loss(&f1, f0, c, dgp.cqc(y0, &[x]), 2001);
            assert!((q - gaussian_pointwise_loss(&dgp, c, y0, &[x])).abs() < 1e-10);
        }
    }

    #[test]
    fn counting_and_determinism() {
        let plan = small_plan(
            Axis::Slope { gammas: vec![0.0, 2.0, 4.0] },
            &["dr_lin:oracle", "invert_dr:oracle"],
            2,
        );
        let a = run_experiment(&plan, None).unwrap();
        assert_eq!(a.rows.len(), 3 * 2 * 2);
        assert_eq!(a.records.len(), 3 * 2);
        let b = run_experiment(&plan, None).unwrap();
        assert_eq!(results_csv(&a.rows), results_csv(&b.rows));
        assert_eq!(aggregate_csv(&a.records), aggregate_csv(&b.records));
    }

    #[test]
    fn partial_noise_targets_report_oracle_ccdfs() {
        let plan = small_plan(
            Axis::NuisanceNoise {
                levels: vec![0.0, 0.5],
                targets: vec![NoiseTarget::Propensity],
                bias: 1.0,
            },
            &["dr_lin:estimated"],
            1,
        );
        let out = run_experiment(&plan, None).unwrap();
        for r in &out.rows {
            assert_eq!(r.ccdf, "oracle");
            assert!(r.propensity.starts_with("perturbed-fitted@"));
        }
        let csv = results_csv(&out.rows);
        assert!(csv.lines().next().unwrap().starts_with("axis,axis_value,method,replication,mae,seconds"));
    }

    #[test]
    fn invalid_plans_rejected() {
        let mut p = small_plan(Axis::Slope { gammas: vec![1.0] }, &["dr_lin:oracle"], 1);
        p.replications = 0;
        assert!(run_experiment(&p, None).is_err());
        let mut p = small_plan(Axis::Slope { gammas: vec![] }, &["dr_lin:oracle"], 1);
        assert!(p.validate().is_err());
        p.axis = Axis::Slope { gammas: vec![1.0] };
        p.design.name = "nope".into();
        assert!(p.validate().is_err());
        let mut p = small_plan(Axis::Slope { gammas: vec![1.0] }, &["dr_lin:oracle"], 1);
        p.settings.lr_grid = Some(vec![0.1, 0.0]);
        assert!(p.validate().is_err());
    }
}
