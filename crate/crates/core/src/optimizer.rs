//! Fitting the CQC model on the second half of the data: projected SGD with
//! averaged iterates, and Adam.
//!
//! Each sample `i` of the fitting set gets one `Y₀` draw per epoch from the
//! bound sampler, seeded by `(seed, epoch, i)`, so runs are reproducible
//! regardless of batch layout.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{Arm, Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{project_ball_in_place, CqcModel};
use crate::nuisance::NuisanceSet;
use crate::objective::{loss_quadrature, GradKind, PreparedBatch, Y0Source, DEFAULT_NODES};
use crate::rng;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrongStep {
    /// `η_t = 1/(μ t)`.
    PerIteration,
    /// `η_t = 1/(μ n)`, constant in `t`.
    PerSampleSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleSpec {
    /// `η = B·a/(2ρ√n)`.
    TheoremConvex { radius: f64, a_clip: f64, rho: f64 },
    /// `μ` is the product of the density and feature-correlation lower bounds.
    TheoremStrong { mu: f64, step: StrongStep },
    Constant { eta: f64 },
    /// `η_t = η / (1 + rate·(t − 1))`.
    ConstantWithDecay { eta: f64, rate: f64 },
}

impl ScheduleSpec {
    fn is_theorem(&self) -> bool {
        matches!(self, ScheduleSpec::TheoremConvex { .. } | ScheduleSpec::TheoremStrong { .. })
    }

    fn validate(&self) -> Result<()> {
        match *self {
            ScheduleSpec::TheoremConvex { radius, a_clip, rho } => {
                if !rho.is_finite() || rho <= 0.0 {
                    return Err(Error::invalid(
                        "theorem schedule needs a finite feature bound rho; compute it with empirical_rho",
                    ));
                }
                if !(radius > 0.0 && a_clip > 0.0) {
                    return Err(Error::invalid("theorem schedule needs positive radius and clip"));
                }
            }
            ScheduleSpec::TheoremStrong { mu, .. } => {
                if !(mu > 0.0 && mu.is_finite()) {
                    return Err(Error::invalid(format!("strong convexity constant must be positive, got {mu}")));
                }
            }
            ScheduleSpec::Constant { eta } | ScheduleSpec::ConstantWithDecay { eta, .. } => {
                if !(eta > 0.0 && eta.is_finite()) {
                    return Err(Error::invalid(format!("step size must be positive, got {eta}")));
                }
            }
        }
        Ok(())
    }

    /// Step size at iteration `t` (1-based) of a run with `n` samples.
    pub fn step(&self, t: usize, n: usize) -> f64 {
        match *self {
            ScheduleSpec::TheoremConvex { radius, a_clip, rho } => radius * a_clip / (2.0 * rho * (n as f64).sqrt()),
            ScheduleSpec::TheoremStrong { mu, step } => match step {
                StrongStep::PerIteration => 1.0 / (mu * t as f64),
                StrongStep::PerSampleSize => 1.0 / (mu * n as f64),
            },
            ScheduleSpec::Constant { eta } => eta,
            ScheduleSpec::ConstantWithDecay { eta, rate } => eta / (1.0 + rate * (t as f64 - 1.0)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "epochs", rename_all = "snake_case")]
pub enum Passes {
    SinglePass,
    Epochs(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub schedule: ScheduleSpec,
    /// Projection radius; `None` disables projection.
    pub radius: Option<f64>,
    pub passes: Passes,
    pub grad: GradKind,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "size", rename_all = "snake_case")]
pub enum BatchSpec {
    Full,
    Size(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub iters: usize,
    pub batch: BatchSpec,
    pub grad: GradKind,
    pub seed: u64,
    /// Optional decay `lr_t = lr / (1 + decay·(t − 1))`.
    pub decay: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.1,
            iters: 1000,
            batch: BatchSpec::Full,
            grad: GradKind::Dr,
            seed: 0,
            decay: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerSpec {
    Sgd(SgdConfig),
    Adam(AdamConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Average of the iterates; equals `theta_last` for Adam.
    pub theta_avg: Vec<f64>,
    pub theta_last: Vec<f64>,
    /// Validation loss (trimmed quadrature mean) recorded during fitting.
    pub trajectory: Vec<f64>,
    pub optimizer: OptimizerSpec,
    pub seeds: Vec<u64>,
    pub iterations: usize,
}

impl FitResult {
    /// The model carrying the primary estimate (average for SGD, last
    /// iterate for Adam).
    pub fn estimate(&self, template: &CqcModel) -> CqcModel {
        let mut m = template.clone();
        m.set_params(&self.theta_avg);
        m
    }
}

/// Holdout pairs used to track the validation loss while fitting.
pub struct Monitor<'a> {
    pub holdout: &'a [(f64, &'a Sample)],
    pub trim: f64,
    /// Record every this many iterations (SGD records once per epoch).
    pub every: usize,
}

pub fn validate(model: &CqcModel, nuisances: &NuisanceSet, holdout: &[(f64, &Sample)], trim: f64) -> Result<f64> {
    Ok(loss_quadrature(model, nuisances, holdout, DEFAULT_NODES, trim)?.trimmed_mean_loss)
}

/// Projected SGD. Linear models start from `θ = 0`; networks start from
/// their initial weights. The average runs over all visited iterates
/// including the final one.
pub fn fit_sgd(
    model0: &CqcModel,
    nuisances: &NuisanceSet,
    fit_data: &Dataset,
    y0: &Y0Source,
    cfg: &SgdConfig,
    monitor: Option<&Monitor<'_>>,
) -> Result<FitResult> {
    cfg.schedule.validate()?;
    if cfg.schedule.is_theorem() && !model0.is_linear() {
        return Err(Error::invalid("theorem schedules require a model linear in its parameters"));
    }
    if fit_data.is_empty() {
        return Err(Error::invalid("fitting data is empty"));
    }
    let epochs = match cfg.passes {
        Passes::SinglePass => 1,
        Passes::Epochs(t) if t >= 1 => t,
        Passes::Epochs(_) => return Err(Error::invalid("epochs must be at least 1")),
    };
    let prepared = PreparedBatch::new(nuisances, fit_data.iter())?;
    let n = prepared.len();
    let mut model = model0.clone();
    if model.is_linear() {
        model.params_mut().iter_mut().for_each(|t| *t = 0.0);
    }
    let p = model.num_params();
    let mut sum: Vec<f64> = model.params().to_vec();
    let mut visited = 1usize;
    let mut scratch = vec![0.0; p];
    let mut v = vec![0.0; p];
    let mut trajectory = Vec::new();
    let mut t = 0usize;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..epochs {
        let mut r = rng::rng_from(cfg.seed, &[0x5DD, epoch as u64]);
        order.shuffle(&mut r);
        for &i in &order {
            t += 1;
            let x = &prepared.sample(i).x;
            let y0v = y0.draw_indexed(x, cfg.seed, epoch as u64, i as u64);
            v.iter_mut().for_each(|g| *g = 0.0);
            prepared.accumulate(cfg.grad, &model, i, y0v, &mut scratch, &mut v)?;
            let eta = cfg.schedule.step(t, n);
            for (th, g) in model.params_mut().iter_mut().zip(&v) {
                *th -= eta * g;
            }
            if let Some(b) = cfg.radius {
                project_ball_in_place(model.params_mut(), b)?;
            }
            for (s, th) in sum.iter_mut().zip(model.params()) {
                *s += th;
            }
            visited += 1;
        }
        if let Some(mon) = monitor {
            let mut avg = model.clone();
            let a: Vec<f64> = sum.iter().map(|s| s / visited as f64).collect();
            avg.set_params(&a);
            trajectory.push(validate(&avg, nuisances, mon.holdout, mon.trim)?);
        }
    }
    let theta_avg: Vec<f64> = sum.iter().map(|s| s / visited as f64).collect();
    if theta_avg.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("SGD iterates".into()));
    }
    Ok(FitResult {
        theta_avg,
        theta_last: model.params().to_vec(),
        trajectory,
        optimizer: OptimizerSpec::Sgd(cfg.clone()),
        seeds: vec![cfg.seed],
        iterations: t,
    })
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Adam on the Monte-Carlo gradient, starting from `model0`'s parameters.
/// Returns the last iterate.
pub fn fit_adam(
    model0: &CqcModel,
    nuisances: &NuisanceSet,
    fit_data: &Dataset,
    y0: &Y0Source,
    cfg: &AdamConfig,
    monitor: Option<&Monitor<'_>>,
) -> Result<FitResult> {
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if cfg.iters == 0 {
        return Err(Error::invalid("iterations must be at least 1"));
    }
    if fit_data.is_empty() {
        return Err(Error::invalid("fitting data is empty"));
    }
    let prepared = PreparedBatch::new(nuisances, fit_data.iter())?;
    let n = prepared.len();
    let mut model = model0.clone();
    let p = model.num_params();
    let (mut m, mut v) = (vec![0.0; p], vec![0.0; p]);
    let mut scratch = vec![0.0; p];
    let mut g = vec![0.0; p];
    let mut trajectory = Vec::new();
    let mut idx: Vec<usize> = (0..n).collect();
    for t in 1..=cfg.iters {
        g.iter_mut().for_each(|x| *x = 0.0);
        let batch: &[usize] = match cfg.batch {
            BatchSpec::Full => &idx,
            BatchSpec::Size(k) => {
                let mut r = rng::rng_from(cfg.seed, &[0xBA7C, t as u64]);
                idx.shuffle(&mut r);
                &idx[..k.clamp(1, n)]
            }
        };
        for &i in batch {
            let x = &prepared.sample(i).x;
            let y0v = y0.draw_indexed(x, cfg.seed, t as u64, i as u64);
            prepared.accumulate(cfg.grad, &model, i, y0v, &mut scratch, &mut g)?;
        }
        let bn = batch.len() as f64;
        let lr = match cfg.decay {
            Some(rate) => cfg.lr / (1.0 + rate * (t as f64 - 1.0)),
            None => cfg.lr,
        };
        let c1 = 1.0 - BETA1.powi(t as i32);
        let c2 = 1.0 - BETA2.powi(t as i32);
        for k in 0..p {
            let gk = g[k] / bn;
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * gk;
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * gk * gk;
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            model.params_mut()[k] -= lr * mh / (vh.sqrt() + EPS);
        }
        if let Some(mon) = monitor {
            if t % mon.every.max(1) == 0 || t == cfg.iters {
                trajectory.push(validate(&model, nuisances, mon.holdout, mon.trim)?);
            }
        }
    }
    let theta = model.params().to_vec();
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Adam iterates".into()));
    }
    Ok(FitResult {
        theta_avg: theta.clone(),
        theta_last: theta,
        trajectory,
        optimizer: OptimizerSpec::Adam(cfg.clone()),
        seeds: vec![cfg.seed],
        iterations: cfg.iters,
    })
}

pub fn fit(
    model0: &CqcModel,
    nuisances: &NuisanceSet,
    fit_data: &Dataset,
    y0: &Y0Source,
    spec: &OptimizerSpec,
    monitor: Option<&Monitor<'_>>,
) -> Result<FitResult> {
    match spec {
        OptimizerSpec::Sgd(c) => fit_sgd(model0, nuisances, fit_data, y0, c, monitor),
        OptimizerSpec::Adam(c) => fit_adam(model0, nuisances, fit_data, y0, c, monitor),
    }
}

/// Index of the smallest score; NaN counts as +∞ and ties keep the first.
pub fn argmin_score(scores: &[f64]) -> Option<usize> {
    let key = |s: f64| if s.is_nan() { f64::INFINITY } else { s };
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some(b) if key(scores[b]) <= key(s) => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Learning-rate search for Adam on an 80-20 split of the fitting data,
/// scored by the trimmed validation loss. Returns the chosen rate and all
/// scores (failed fits score +∞).
pub fn select_lr(
    model0: &CqcModel,
    nuisances: &NuisanceSet,
    fit_data: &Dataset,
    y0: &Y0Source,
    base: &AdamConfig,
    grid: &[f64],
    trim: f64,
) -> Result<(f64, Vec<f64>)> {
    if grid.is_empty() {
        return Err(Error::invalid("learning-rate grid is empty"));
    }
    let n = fit_data.len();
    let n_train = ((n as f64) * 0.8).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::InsufficientData(n));
    }
    let train = fit_data.subset(&(0..n_train).collect::<Vec<_>>());
    let hold = fit_data.subset(&(n_train..n).collect::<Vec<_>>());
    let holdout: Vec<(f64, &Sample)> = hold
        .iter()
        .enumerate()
        .map(|(i, s)| (y0.draw_indexed(&s.x, base.seed ^ 0x7A1D, 0, i as u64), s))
        .collect();
    let scores: Vec<f64> = grid
        .iter()
        .map(|&lr| {
            let cfg = AdamConfig { lr, ..base.clone() };
            match fit_adam(model0, nuisances, &train, y0, &cfg, None) {
                Ok(res) => {
                    let m = res.estimate(model0);
                    validate(&m, nuisances, &holdout, trim).unwrap_or(f64::INFINITY)
                }
                Err(_) => f64::INFINITY,
            }
        })
        .collect();
    let best = argmin_score(&scores).expect("grid nonempty");
    Ok((grid[best], scores))
}

/// Largest feature norm over the given `(y₀, x)` points.
pub fn empirical_rho(model: &CqcModel, points: &[(f64, &[f64])]) -> Result<f64> {
    let fm = model
        .features()
        .ok_or_else(|| Error::invalid("empirical rho needs a linear-in-features model"))?;
    let mut phi = vec![0.0; fm.p()];
    let mut rho: f64 = 0.0;
    for (y0, x) in points {
        fm.eval_into(*y0, x, &mut phi)?;
        rho = rho.max(stats::norm(&phi));
    }
    Ok(rho)
}

/// Default projection radius: ten times the norm of a ridge fit of treated
/// outcomes on `φ(y₀, x)`, where each treated outcome is paired with the
/// untreated outcome at the same marginal rank. Never below 1.
pub fn default_radius(model: &CqcModel, data: &Dataset, ridge: f64) -> Result<f64> {
    let fm = model
        .features()
        .ok_or_else(|| Error::invalid("default radius needs a linear-in-features model"))?;
    let mut y0s = data.outcomes(Arm::Control);
    let treated: Vec<&Sample> = data.iter().filter(|s| s.a.is_treated()).collect();
    if y0s.is_empty() || treated.is_empty() {
        return Err(Error::EmptyArm(if y0s.is_empty() { 0 } else { 1 }));
    }
    y0s.sort_by(f64::total_cmp);
    let mut order: Vec<usize> = (0..treated.len()).collect();
    order.sort_by(|&a, &b| treated[a].y.total_cmp(&treated[b].y));
    let p = fm.p();
    let m = treated.len();
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    let mut phi = vec![0.0; p];
    for (rank, &k) in order.iter().enumerate() {
        let q = (rank as f64 + 0.5) / m as f64;
        let y0 = stats::quantile_sorted(&y0s, q);
        let s = treated[k];
        fm.eval_into(y0, &s.x, &mut phi)?;
        let f = DVector::from_column_slice(&phi);
        xtx += &f * f.transpose();
        xty += &f * s.y;
    }
    for i in 0..p {
        xtx[(i, i)] += ridge * m as f64;
    }
    let theta = xtx
        .cholesky()
        .ok_or_else(|| Error::NonFinite("ridge warm start".into()))?
        .solve(&xty);
    Ok((10.0 * theta.norm()).max(1.0))
}
