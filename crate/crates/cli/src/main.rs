//! `cqc`: simulate data, fit conditional quantile comparators, evaluate
//! them, draw Δ-surfaces and run replicated simulation sweeps.
//!
//! Every subcommand accepts `--config FILE` (TOML); flags given on the
//! command line override the file. Exit status: 0 success, 2 config error,
//! 3 data error, 4 numeric failure.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cqc_core::model::Activation;
use cqc_core::simlab::{DesignChoice, MethodTag};

use config::{
    build_axis, expand_targets, load, AxisChoice, DeltaConfig, ExperimentConfig, FitConfig, GradChoice, ModelKind,
    OptimizerKind, OracleChoice, SamplerChoice, SimulateConfig, TargetChoice, ValidateConfig,
};
use error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "cqc", version, about = "Direct doubly robust estimation of conditional quantile comparators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a dataset from a registered simulation design.
    Simulate(SimulateArgs),
    /// Split, fit nuisances and fit a comparator model on a CSV dataset.
    Fit(FitArgs),
    /// Tabulate Δ(y₀|x) = cqc(y₀|x) − y₀ over a grid.
    DeltaSurface(DeltaArgs),
    /// Run a replicated simulation sweep.
    Experiment(ExperimentArgs),
    /// Score a saved model on a dataset.
    ValidateModel(ValidateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// sin_linear (alias sec4), cos_linear (alias appD1) or fig1.
    #[arg(long)]
    dgp: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Nuisance flags shared by `fit` and `validate-model`.
#[derive(Args)]
struct NuisanceArgs {
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    bandwidth_grid: Option<Vec<f64>>,
    /// Use the true nuisances of this design instead of fitting them.
    #[arg(long)]
    oracle_dgp: Option<String>,
    #[arg(long, requires = "oracle_dgp")]
    oracle_gamma: Option<f64>,
    #[arg(long, requires = "oracle_dgp")]
    oracle_d: Option<usize>,
    #[arg(long, requires = "oracle_dgp")]
    oracle_seed: Option<u64>,
    #[arg(long)]
    outcome_col: Option<String>,
    #[arg(long)]
    treatment_col: Option<String>,
    #[arg(long, value_delimiter = ',')]
    covariate_cols: Option<Vec<String>>,
}

impl NuisanceArgs {
    fn apply(self, n: &mut config::NuisanceConfig, c: &mut config::ColumnsConfig) {
        set(&mut n.clip, self.clip);
        if self.l2.is_some() {
            n.l2 = self.l2;
        }
        set(&mut n.bandwidth_grid, self.bandwidth_grid);
        if let Some(dgp) = self.oracle_dgp {
            let prev = n.oracle.take();
            n.oracle = Some(OracleChoice {
                dgp,
                gamma: self.oracle_gamma.or(prev.as_ref().map(|o| o.gamma)).unwrap_or(2.0),
                d: self.oracle_d.or(prev.as_ref().map(|o| o.d)).unwrap_or(10),
                seed: self.oracle_seed.or(prev.as_ref().map(|o| o.seed)).unwrap_or(0),
            });
        }
        set(&mut c.outcome, self.outcome_col);
        set(&mut c.treatment, self.treatment_col);
        if self.covariate_cols.is_some() {
            c.covariates = self.covariate_cols;
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Model JSON output (default model.json).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fit report JSON (default <out>.report.json).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    model: Option<ModelKind>,
    #[arg(long)]
    rff_features: Option<usize>,
    #[arg(long)]
    rff_lengthscale: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long, value_parser = parse_activation)]
    activation: Option<Activation>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerKind>,
    #[arg(long, value_enum)]
    grad: Option<GradChoice>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    /// Candidate learning rates, chosen on an 80/20 split.
    #[arg(long, value_delimiter = ',')]
    lr_grid: Option<Vec<f64>>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_enum)]
    sampler: Option<SamplerChoice>,
    #[arg(long)]
    trim: Option<f64>,
    #[command(flatten)]
    nuisance: NuisanceArgs,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    sampler: Option<SamplerChoice>,
    #[arg(long)]
    trim: Option<f64>,
    #[arg(long)]
    eval_points: Option<usize>,
    #[command(flatten)]
    nuisance: NuisanceArgs,
}

#[derive(Args)]
struct DeltaArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    table: Option<PathBuf>,
    /// Covariate index (0-based) swept along the surface.
    #[arg(long)]
    axis: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    x_lo: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    x_hi: Option<f64>,
    #[arg(long)]
    x_points: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    y0_lo: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    y0_hi: Option<f64>,
    #[arg(long)]
    y0_points: Option<usize>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x_fixed: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    names: Option<Vec<String>>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker threads; falls back to the config, then CQC_JOBS.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, value_enum, requires = "values")]
    axis: Option<AxisChoice>,
    /// Axis values, comma separated.
    #[arg(long, value_delimiter = ',', requires = "axis")]
    values: Option<Vec<String>>,
    /// Perturbed nuisances for the noise axis.
    #[arg(long, value_enum, value_delimiter = ',')]
    targets: Option<Vec<TargetChoice>>,
    #[arg(long)]
    noise_bias: Option<f64>,
    /// Method tags such as dr_lin:estimated,invert_dr:oracle.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_points: Option<usize>,
    #[arg(long)]
    dgp: Option<String>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Candidate learning rates, chosen per fit on an 80/20 split.
    #[arg(long, value_delimiter = ',')]
    lr_grid: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    sampler: Option<SamplerChoice>,
    /// Aggregate with the 2.5%-truncated mean.
    #[arg(long)]
    truncate: bool,
    /// Record per-cell wall-clock seconds.
    #[arg(long)]
    timing: bool,
}

fn parse_activation(s: &str) -> Result<Activation, String> {
    match s {
        "relu" => Ok(Activation::Relu),
        "tanh" => Ok(Activation::Tanh),
        other => Err(format!("unknown activation `{other}` (relu or tanh)")),
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn simulate(a: SimulateArgs) -> CliResult<()> {
    let mut c: SimulateConfig = load(a.config.as_deref())?;
    set(&mut c.dgp, a.dgp);
    set(&mut c.gamma, a.gamma);
    set(&mut c.d, a.d);
    set(&mut c.n, a.n.map(|n| n as usize));
    set(&mut c.seed, a.seed);
    if a.out.is_some() {
        c.out = a.out;
    }
    commands::simulate(&c)
}

fn fit(a: FitArgs) -> CliResult<()> {
    let mut c: FitConfig = load(a.config.as_deref())?;
    if a.data.is_some() {
        c.data = a.data;
    }
    if a.out.is_some() {
        c.out = a.out;
    }
    if a.report.is_some() {
        c.report = a.report;
    }
    set(&mut c.seed, a.seed);
    set(&mut c.model, a.model);
    set(&mut c.rff_features, a.rff_features);
    set(&mut c.rff_lengthscale, a.rff_lengthscale);
    set(&mut c.hidden, a.hidden);
    set(&mut c.activation, a.activation);
    set(&mut c.optimizer, a.optimizer);
    set(&mut c.grad, a.grad);
    set(&mut c.lr, a.lr);
    set(&mut c.iters, a.iters);
    if a.lr_grid.is_some() {
        c.lr_grid = a.lr_grid;
    }
    if a.lr_decay.is_some() {
        c.lr_decay = a.lr_decay;
    }
    set(&mut c.epochs, a.epochs);
    set(&mut c.sampler, a.sampler);
    set(&mut c.trim, a.trim);
    a.nuisance.apply(&mut c.nuisance, &mut c.columns);
    commands::fit_cmd(&c).map(|_| ())
}

fn validate(a: ValidateArgs) -> CliResult<()> {
    let mut c: ValidateConfig = load(a.config.as_deref())?;
    if a.model.is_some() {
        c.model = a.model;
    }
    if a.data.is_some() {
        c.data = a.data;
    }
    if a.out.is_some() {
        c.out = a.out;
    }
    set(&mut c.seed, a.seed);
    set(&mut c.sampler, a.sampler);
    set(&mut c.trim, a.trim);
    set(&mut c.eval_points, a.eval_points);
    a.nuisance.apply(&mut c.nuisance, &mut c.columns);
    commands::validate_model(&c).map(|_| ())
}

fn delta(a: DeltaArgs) -> CliResult<()> {
    let mut c: DeltaConfig = load(a.config.as_deref())?;
    if a.model.is_some() {
        c.model = a.model;
    }
    if a.out.is_some() {
        c.out = a.out;
    }
    if a.table.is_some() {
        c.table = a.table;
    }
    set(&mut c.axis, a.axis);
    set(&mut c.x_lo, a.x_lo);
    set(&mut c.x_hi, a.x_hi);
    set(&mut c.x_points, a.x_points);
    set(&mut c.y0_lo, a.y0_lo);
    set(&mut c.y0_hi, a.y0_hi);
    set(&mut c.y0_points, a.y0_points);
    if a.x_fixed.is_some() {
        c.x_fixed = a.x_fixed;
    }
    if a.names.is_some() {
        c.names = a.names;
    }
    commands::delta_surface(&c)
}

fn experiment(a: ExperimentArgs) -> CliResult<()> {
    let mut c: ExperimentConfig = load(a.config.as_deref())?;
    set(&mut c.out_dir, a.out_dir);
    if a.jobs.is_some() {
        c.jobs = a.jobs;
    }
    let p = &mut c.plan;
    let targets = a.targets.as_deref().map(expand_targets);
    if let (Some(kind), Some(values)) = (a.axis, a.values.as_ref()) {
        p.axis = build_axis(kind, values, targets, a.noise_bias, &p.axis)?;
    } else if targets.is_some() || a.noise_bias.is_some() {
        match &mut p.axis {
            cqc_core::simlab::Axis::NuisanceNoise { targets: t, bias, .. } => {
                set(t, targets);
                set(bias, a.noise_bias);
            }
            _ => return Err(CliError::Config("--targets and --noise-bias need a nuisance_noise axis".into())),
        }
    }
    if let Some(ms) = a.methods {
        p.methods = ms
            .iter()
            .map(|m| m.trim().parse::<MethodTag>())
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    set(&mut p.replications, a.replications);
    set(&mut p.base_seed, a.seed);
    set(&mut p.eval_points, a.eval_points);
    let DesignChoice { name, d, gamma } = &mut p.design;
    set(name, a.dgp);
    set(d, a.d);
    set(gamma, a.gamma);
    set(&mut p.settings.n, a.n);
    set(&mut p.settings.iters, a.iters);
    set(&mut p.settings.lr, a.lr);
    if a.lr_grid.is_some() {
        p.settings.lr_grid = a.lr_grid;
    }
    set(&mut p.settings.y0_sampler, a.sampler.map(SamplerChoice::sampler));
    p.settings.truncate |= a.truncate;
    p.settings.timing |= a.timing;
    commands::experiment(&c)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::DeltaSurface(a) => delta(a),
        Command::Experiment(a) => experiment(a),
        Command::ValidateModel(a) => validate(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cqc: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
