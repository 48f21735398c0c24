//! Subcommand implementations. Every command validates its full config
//! before touching data and writes its effective config next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use cqc_core::dataset::{read_csv, split_half, write_csv, Arm, ColumnSpec, Dataset, Sample};
use cqc_core::model::{CqcModel, FeatureKind, FeatureMap, LinearCqc, MlpCqc};
use cqc_core::nuisance::{
    fit_ccdf, fit_propensity, oracle_nuisances, select_bandwidth, BandwidthValidation, NuisanceProvenance,
    NuisanceSet, Provenance,
};
use cqc_core::objective::{loss_quadrature, Y0Source, DEFAULT_NODES};
use cqc_core::optimizer::{
    default_radius, empirical_rho, fit, select_lr, AdamConfig, BatchSpec, FitResult, Monitor, OptimizerSpec, Passes,
    ScheduleSpec, SgdConfig,
};
use cqc_core::rng::derive_seed;
use cqc_core::simlab::{aggregate_csv, eval_points, mae, results_csv, run_experiment, DgpSpec};
use cqc_core::objective::GradKind;
use serde::Serialize;

use crate::config::{
    echo, sibling, ColumnsConfig, DeltaConfig, ExperimentConfig, FitConfig, GradChoice, ModelKind, NuisanceConfig,
    OptimizerKind, SamplerChoice, SimulateConfig, ValidateConfig,
};
use crate::error::{CliError, CliResult, Context};

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(format!("json: {e}")))?;
    write_text(path, &(text + "\n"))
}

fn require_file(path: &Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    let p = path
        .clone()
        .ok_or_else(|| CliError::Config(format!("no {what} given")))?;
    if !p.is_file() {
        return Err(CliError::Data(format!("{what} `{}` does not exist", p.display())));
    }
    Ok(p)
}

// ---------------------------------------------------------------------------
// simulate

pub fn simulate(cfg: &SimulateConfig) -> CliResult<()> {
    if cfg.n == 0 {
        return Err(CliError::Config("n must be at least 1".into()));
    }
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| CliError::Config("no output path given".into()))?;
    let dgp = DgpSpec::by_name(&cfg.dgp, cfg.gamma, cfg.d, cfg.seed).ctx("design")?;
    let data = dgp.generate(cfg.n, cfg.seed).ctx("simulate")?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    write_csv(&data, &out).ctx("write dataset")?;
    let effective = SimulateConfig { d: dgp.d, ..cfg.clone() };
    echo(&effective, &sibling(&out, "config.toml"))?;
    println!("seed={} rows={} d={} out={}", cfg.seed, data.len(), data.dim(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// shared pipeline pieces

struct Prepared {
    data: Dataset,
    nuisance_half: Dataset,
    fit_half: Dataset,
    nuisances: NuisanceSet,
    oracle: Option<DgpSpec>,
    bandwidths: Option<(f64, f64)>,
    l2: Option<f64>,
}

fn oracle_design(cfg: &NuisanceConfig) -> CliResult<Option<DgpSpec>> {
    cfg.oracle
        .as_ref()
        .map(|o| DgpSpec::by_name(&o.dgp, o.gamma, o.d, o.seed).ctx("oracle design"))
        .transpose()
}

fn check_nuisance_config(cfg: &NuisanceConfig) -> CliResult<()> {
    if !(cfg.clip > 0.0 && cfg.clip < 0.5) {
        return Err(CliError::Config(format!("clip must lie in (0, 0.5), got {}", cfg.clip)));
    }
    if cfg.bandwidth_grid.is_empty() || cfg.bandwidth_grid.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
        return Err(CliError::Config("bandwidth grid must be nonempty and positive".into()));
    }
    if let Some(l2) = cfg.l2 {
        if !(l2 >= 0.0) {
            return Err(CliError::Config(format!("l2 must be nonnegative, got {l2}")));
        }
    }
    Ok(())
}

fn column_spec(c: &ColumnsConfig) -> ColumnSpec {
    ColumnSpec {
        outcome: c.outcome.clone(),
        treatment: c.treatment.clone(),
        covariates: c.covariates.clone(),
    }
}

/// Reads the data, splits it in half and fits (or substitutes) the
/// nuisances on the first half.
fn prepare(path: &Path, columns: &ColumnsConfig, ncfg: &NuisanceConfig, seed: u64) -> CliResult<Prepared> {
    let oracle = oracle_design(ncfg)?;
    let data = read_csv(path, &column_spec(columns)).ctx("read dataset")?;
    if let Some(o) = &oracle {
        if o.d != data.dim() {
            return Err(CliError::Data(format!(
                "oracle design has dimension {} but the data have {} covariates",
                o.d,
                data.dim()
            )));
        }
    }
    let split = split_half(&data, seed, true).ctx("split")?;
    let nuisance_half = data.subset(&split.nuisance_idx);
    let fit_half = data.subset(&split.fit_idx);
    let (nuisances, bandwidths, l2) = match &oracle {
        Some(o) => (oracle_nuisances(o, ncfg.clip), None, None),
        None => {
            let l2 = ncfg.l2.unwrap_or(1.0 / nuisance_half.len() as f64);
            let propensity = fit_propensity(&nuisance_half, l2, ncfg.clip).ctx("propensity fit")?;
            let cut = (nuisance_half.len() as f64 * 0.8).round() as usize;
            let train = nuisance_half.subset(&(0..cut).collect::<Vec<_>>());
            let val = nuisance_half.subset(&(cut..nuisance_half.len()).collect::<Vec<_>>());
            let scale = (data.dim() as f64).sqrt();
            let grid: Vec<f64> = ncfg.bandwidth_grid.iter().map(|h| h * scale).collect();
            let mut hs = [0.0; 2];
            for (k, arm) in [Arm::Control, Arm::Treated].into_iter().enumerate() {
                hs[k] = select_bandwidth(&train, arm, &grid, BandwidthValidation::Empirical(&val))
                    .ctx("bandwidth selection")?;
            }
            let ccdf0 = fit_ccdf(&nuisance_half, Arm::Control, hs[0]).ctx("ccdf fit")?;
            let ccdf1 = fit_ccdf(&nuisance_half, Arm::Treated, hs[1]).ctx("ccdf fit")?;
            let set = NuisanceSet {
                propensity: std::sync::Arc::new(propensity),
                ccdf0: std::sync::Arc::new(ccdf0),
                ccdf1: std::sync::Arc::new(ccdf1),
                provenance: NuisanceProvenance::uniform(Provenance::Fitted),
            };
            (set, Some((hs[0], hs[1])), Some(l2))
        }
    };
    Ok(Prepared {
        data,
        nuisance_half,
        fit_half,
        nuisances,
        oracle,
        bandwidths,
        l2,
    })
}

fn y0_source(sampler: SamplerChoice, data: &Dataset, oracle: Option<&DgpSpec>) -> CliResult<Y0Source> {
    if sampler == SamplerChoice::Conditional && oracle.is_none() {
        return Err(CliError::Config(
            "the conditional sampler needs an oracle design ([nuisance.oracle])".into(),
        ));
    }
    Y0Source::new(&sampler.sampler(), &data.outcomes(Arm::Control), oracle).ctx("y0 sampler")
}

fn holdout_pairs<'a>(src: &Y0Source, data: &'a Dataset, seed: u64) -> Vec<(f64, &'a Sample)> {
    let s = derive_seed(seed, &[0x401D]);
    data.iter()
        .enumerate()
        .map(|(i, z)| (src.draw_indexed(&z.x, s, 0, i as u64), z))
        .collect()
}

// ---------------------------------------------------------------------------
// fit

#[derive(Debug, Serialize)]
pub struct FitReport {
    pub n_total: usize,
    pub n_nuisance: usize,
    pub n_train: usize,
    pub n_validation: usize,
    pub nuisances: String,
    pub bandwidths: Option<(f64, f64)>,
    pub propensity_l2: Option<f64>,
    pub lr: Option<f64>,
    pub lr_grid_scores: Option<Vec<f64>>,
    pub optimizer: OptimizerSpec,
    pub iterations: usize,
    pub seeds: Vec<u64>,
    /// Trimmed mean of the estimated loss on the held-out part of the fit half.
    pub validation_loss: f64,
    /// Same loss at the starting point (`θ = 0` for linear models).
    pub initial_validation_loss: f64,
    pub trajectory: Vec<f64>,
}

fn check_fit_config(cfg: &FitConfig) -> CliResult<()> {
    check_nuisance_config(&cfg.nuisance)?;
    if cfg.iters == 0 || cfg.epochs == 0 {
        return Err(CliError::Config("iterations and epochs must be at least 1".into()));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(CliError::Config(format!("lr must be positive, got {}", cfg.lr)));
    }
    if !(0.0..0.5).contains(&cfg.trim) {
        return Err(CliError::Config(format!("trim must lie in [0, 0.5), got {}", cfg.trim)));
    }
    if cfg.optimizer == OptimizerKind::SgdTheorem && cfg.model == ModelKind::Mlp {
        return Err(CliError::Config(
            "the theorem schedule needs a model linear in its parameters (lin or rff)".into(),
        ));
    }
    if let Some(g) = &cfg.lr_grid {
        if g.is_empty() || g.iter().any(|v| !(*v > 0.0)) {
            return Err(CliError::Config("lr grid must be nonempty and positive".into()));
        }
    }
    oracle_design(&cfg.nuisance)?;
    Ok(())
}

fn initial_model(cfg: &FitConfig, d: usize) -> CliResult<CqcModel> {
    Ok(match cfg.model {
        ModelKind::Lin => CqcModel::Linear(LinearCqc::zeros(FeatureMap::affine(d))),
        ModelKind::Rff => CqcModel::Linear(LinearCqc::zeros(
            FeatureMap::random_fourier(d, cfg.rff_features, cfg.rff_lengthscale, derive_seed(cfg.seed, &[0xFF]))
                .ctx("feature map")?,
        )),
        ModelKind::Mlp => CqcModel::Mlp(MlpCqc::new(d, &cfg.hidden, cfg.activation, derive_seed(cfg.seed, &[0x3])),),
    })
}

pub fn fit_cmd(cfg: &FitConfig) -> CliResult<FitReport> {
    check_fit_config(cfg)?;
    let data_path = require_file(&cfg.data, "dataset")?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("model.json"));
    let report_path = cfg.report.clone().unwrap_or_else(|| sibling(&out, "report.json"));

    let prep = prepare(&data_path, &cfg.columns, &cfg.nuisance, cfg.seed)?;
    let n_fit = prep.fit_half.len();
    let cut = (n_fit as f64 * 0.8).round() as usize;
    if cut == 0 || cut == n_fit {
        return Err(CliError::Data(format!("fit half of {n_fit} rows is too small to hold out validation data")));
    }
    let train = prep.fit_half.subset(&(0..cut).collect::<Vec<_>>());
    let hold = prep.fit_half.subset(&(cut..n_fit).collect::<Vec<_>>());
    let src = y0_source(cfg.sampler, &train, prep.oracle.as_ref())?;
    let holdout = holdout_pairs(&src, &hold, cfg.seed);
    let model0 = initial_model(cfg, prep.data.dim())?;
    let grad = match cfg.grad {
        GradChoice::Dr => GradKind::Dr,
        GradChoice::Ipw => GradKind::Ipw,
    };
    let fit_seed = derive_seed(cfg.seed, &[0xF17]);

    let mut lr_used = None;
    let mut lr_scores = None;
    let spec = match cfg.optimizer {
        OptimizerKind::Adam => {
            let mut a = AdamConfig {
                lr: cfg.lr,
                iters: cfg.iters,
                batch: BatchSpec::Full,
                grad,
                seed: fit_seed,
                decay: cfg.lr_decay,
            };
            if let Some(grid) = &cfg.lr_grid {
                let (lr, scores) = select_lr(&model0, &prep.nuisances, &train, &src, &a, grid, cfg.trim)
                    .ctx("learning-rate search")?;
                a.lr = lr;
                lr_scores = Some(scores);
            }
            lr_used = Some(a.lr);
            OptimizerSpec::Adam(a)
        }
        OptimizerKind::SgdTheorem => {
            let radius = default_radius(&model0, &train, 1e-3).ctx("projection radius")?;
            let (lo, hi) = untreated_range(&train)?;
            let pts: Vec<(f64, &[f64])> = train
                .iter()
                .flat_map(|z| [(lo, z.x.as_slice()), (hi, z.x.as_slice())])
                .collect();
            let rho = empirical_rho(&model0, &pts).ctx("feature bound")?;
            OptimizerSpec::Sgd(SgdConfig {
                schedule: ScheduleSpec::TheoremConvex {
                    radius,
                    a_clip: cfg.nuisance.clip,
                    rho,
                },
                radius: Some(radius),
                passes: if cfg.epochs == 1 {
                    Passes::SinglePass
                } else {
                    Passes::Epochs(cfg.epochs)
                },
                grad,
                seed: fit_seed,
            })
        }
    };
    let monitor = Monitor {
        holdout: &holdout,
        trim: cfg.trim,
        every: (cfg.iters / 20).max(1),
    };
    let res: FitResult = fit(&model0, &prep.nuisances, &train, &src, &spec, Some(&monitor)).ctx("fit")?;
    let model = res.estimate(&model0);
    let loss = |m: &CqcModel| -> CliResult<f64> {
        let r = loss_quadrature(m, &prep.nuisances, &holdout, DEFAULT_NODES, cfg.trim).ctx("validation loss")?;
        Ok(r.trimmed_mean_loss)
    };
    let report = FitReport {
        n_total: prep.data.len(),
        n_nuisance: prep.nuisance_half.len(),
        n_train: train.len(),
        n_validation: hold.len(),
        nuisances: if prep.oracle.is_some() { "oracle" } else { "fitted" }.into(),
        bandwidths: prep.bandwidths,
        propensity_l2: prep.l2,
        lr: lr_used,
        lr_grid_scores: lr_scores,
        optimizer: res.optimizer.clone(),
        iterations: res.iterations,
        seeds: res.seeds.clone(),
        validation_loss: loss(&model)?,
        initial_validation_loss: loss(&model0)?,
        trajectory: res.trajectory.clone(),
    };
    if !report.validation_loss.is_finite() {
        return Err(CliError::Numeric("validation loss is not finite".into()));
    }
    write_json(&model, &out)?;
    write_json(&report, &report_path)?;
    echo(cfg, &sibling(&out, "config.toml"))?;
    println!(
        "model={} validation_loss={:.6} initial_validation_loss={:.6}",
        out.display(),
        report.validation_loss,
        report.initial_validation_loss
    );
    Ok(report)
}

fn untreated_range(data: &Dataset) -> CliResult<(f64, f64)> {
    let ys = data.outcomes(Arm::Control);
    if ys.is_empty() {
        return Err(CliError::Data("no untreated samples in the fit half".into()));
    }
    let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((lo, hi))
}

// ---------------------------------------------------------------------------
// validate-model

#[derive(Debug, Serialize)]
pub struct ValidationReport {
    pub n: usize,
    pub nuisances: String,
    pub mean_loss: f64,
    pub trimmed_mean_loss: f64,
    pub trim: f64,
    /// Mean absolute error against the oracle design's CQC, when given.
    pub mae: Option<f64>,
}

fn read_model(path: &Path) -> CliResult<CqcModel> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn validate_model(cfg: &ValidateConfig) -> CliResult<ValidationReport> {
    check_nuisance_config(&cfg.nuisance)?;
    if !(0.0..0.5).contains(&cfg.trim) || cfg.eval_points == 0 {
        return Err(CliError::Config("trim must lie in [0, 0.5) and eval_points be positive".into()));
    }
    oracle_design(&cfg.nuisance)?;
    let model_path = require_file(&cfg.model, "model")?;
    let data_path = require_file(&cfg.data, "dataset")?;
    let model = read_model(&model_path)?;
    let prep = prepare(&data_path, &cfg.columns, &cfg.nuisance, cfg.seed)?;
    if model.d() != prep.data.dim() {
        return Err(CliError::Data(format!(
            "model expects {} covariates but the data have {}",
            model.d(),
            prep.data.dim()
        )));
    }
    let src = y0_source(cfg.sampler, &prep.fit_half, prep.oracle.as_ref())?;
    let holdout = holdout_pairs(&src, &prep.fit_half, cfg.seed);
    let r = loss_quadrature(&model, &prep.nuisances, &holdout, DEFAULT_NODES, cfg.trim).ctx("validation loss")?;
    let err = prep
        .oracle
        .as_ref()
        .map(|o| mae(&model, o, &eval_points(o, cfg.eval_points, derive_seed(cfg.seed, &[0xE7]))));
    let report = ValidationReport {
        n: holdout.len(),
        nuisances: if prep.oracle.is_some() { "oracle" } else { "fitted" }.into(),
        mean_loss: r.mean_loss,
        trimmed_mean_loss: r.trimmed_mean_loss,
        trim: cfg.trim,
        mae: err,
    };
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Config(format!("json: {e}")))?;
    println!("{text}");
    if let Some(out) = &cfg.out {
        write_text(out, &(text + "\n"))?;
        echo(cfg, &sibling(out, "config.toml"))?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// delta-surface

fn linspace(lo: f64, hi: f64, m: usize) -> Vec<f64> {
    if m == 1 {
        return vec![lo];
    }
    (0..m).map(|k| lo + (hi - lo) * k as f64 / (m - 1) as f64).collect()
}

/// Shift and scale coefficients per covariate for affine models, with the
/// intercept first: `cqc = shift(x) + scale(x)·y₀`.
pub fn parameter_table(model: &CqcModel, names: &[String]) -> Option<String> {
    let CqcModel::Linear(lin) = model else {
        return None;
    };
    if *lin.features.kind() != FeatureKind::AffineShiftScale {
        return None;
    }
    let d = lin.features.d();
    let t = &lin.theta;
    let mut out = String::from("covariate,shift,scale\n");
    out.push_str(&format!("intercept,{},{}\n", t[2 * d + 1], t[d]));
    for j in 0..d {
        let name = names.get(j).cloned().unwrap_or_else(|| format!("x{}", j + 1));
        out.push_str(&format!("{name},{},{}\n", t[d + 1 + j], t[j]));
    }
    Some(out)
}

pub fn delta_surface(cfg: &DeltaConfig) -> CliResult<()> {
    if cfg.x_points == 0 || cfg.y0_points == 0 {
        return Err(CliError::Config("grid sizes must be at least 1".into()));
    }
    if !(cfg.x_lo.is_finite() && cfg.x_hi.is_finite() && cfg.y0_lo.is_finite() && cfg.y0_hi.is_finite()) {
        return Err(CliError::Config("grid bounds must be finite".into()));
    }
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| CliError::Config("no output path given".into()))?;
    let model_path = require_file(&cfg.model, "model")?;
    let model = read_model(&model_path)?;
    let d = model.d();
    if cfg.axis >= d {
        return Err(CliError::Config(format!(
            "covariate index {} out of range for a model with {d} covariates",
            cfg.axis
        )));
    }
    let base = match &cfg.x_fixed {
        Some(v) if v.len() != d => {
            return Err(CliError::Config(format!("x_fixed has {} values, expected {d}", v.len())))
        }
        Some(v) => v.clone(),
        None => vec![0.0; d],
    };
    let mut text = String::from("y0,x_axis_value,delta\n");
    let mut x = base;
    for y0 in linspace(cfg.y0_lo, cfg.y0_hi, cfg.y0_points) {
        for xv in linspace(cfg.x_lo, cfg.x_hi, cfg.x_points) {
            x[cfg.axis] = xv;
            let c = model.value(y0, &x).ctx("model evaluation")?;
            if !c.is_finite() {
                return Err(CliError::Numeric(format!("non-finite comparator at y0={y0}, x={xv}")));
            }
            text.push_str(&format!("{y0},{xv},{}\n", c - y0));
        }
    }
    write_text(&out, &text)?;
    if let Some(table) = parameter_table(&model, cfg.names.as_deref().unwrap_or(&[])) {
        let path = cfg.table.clone().unwrap_or_else(|| sibling(&out, "params.csv"));
        write_text(&path, &table)?;
    }
    echo(cfg, &sibling(&out, "config.toml"))?;
    println!("surface={} rows={}", out.display(), cfg.x_points * cfg.y0_points);
    Ok(())
}

// ---------------------------------------------------------------------------
// experiment

pub fn experiment(cfg: &ExperimentConfig) -> CliResult<()> {
    cfg.plan.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let jobs = match cfg.jobs {
        Some(j) => Some(j),
        None => match std::env::var("CQC_JOBS") {
            Ok(v) => Some(
                v.parse::<usize>()
                    .map_err(|_| CliError::Config(format!("CQC_JOBS=`{v}` is not an integer")))?,
            ),
            Err(_) => None,
        },
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        builder = builder.num_threads(j);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let progress = |msg: &str| eprintln!("{msg}");
    let output = pool
        .install(|| run_experiment(&cfg.plan, Some(&progress)))
        .ctx("experiment")?;

    fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::io(&cfg.out_dir, e))?;
    write_text(&cfg.out_dir.join("results.csv"), &results_csv(&output.rows))?;
    write_text(&cfg.out_dir.join("aggregate.csv"), &aggregate_csv(&output.records))?;
    echo(cfg, &cfg.out_dir.join("config.toml"))?;

    let mut fully_failed = Vec::new();
    for r in &output.records {
        println!(
            "{}={} {}: mean MAE {:.4} ± {:.4} ({} ok, {} failed)",
            r.axis,
            r.axis_value,
            r.method,
            r.mean,
            r.ci,
            r.maes.len(),
            r.failures
        );
        if r.maes.is_empty() {
            fully_failed.push(format!("{}={} {}", r.axis, r.axis_value, r.method));
        }
    }
    for row in output.rows.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "failure: {}={} {} replication {}: {}",
            row.axis,
            row.axis_value,
            row.method,
            row.replication,
            row.error.as_deref().unwrap_or_default()
        );
    }
    if !fully_failed.is_empty() {
        return Err(CliError::Numeric(format!(
            "every replication failed for: {}",
            fully_failed.join("; ")
        )));
    }
    Ok(())
}
