//! Declarative run configurations. Each subcommand reads an optional TOML
//! file into its config struct, then command-line flags overwrite fields.

use std::fs;
use std::path::{Path, PathBuf};

use cqc_core::model::Activation;
use cqc_core::nuisance::{NoiseTarget, DEFAULT_CLIP};
use cqc_core::objective::Y0Sampler;
use cqc_core::simlab::{Axis, ExperimentPlan};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Writes the effective config next to an output.
pub fn echo<T: Serialize>(config: &T, path: &Path) -> CliResult<()> {
    let text = toml::to_string_pretty(config).map_err(|e| CliError::Config(format!("config echo: {e}")))?;
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// `foo.csv` becomes `foo.csv.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub dgp: String,
    pub gamma: f64,
    /// Dimension for designs with a free dimension; fixed designs ignore it.
    pub d: usize,
    pub n: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            dgp: "sin_linear".into(),
            gamma: 2.0,
            d: 10,
            n: 500,
            seed: 0,
            out: None,
        }
    }
}

/// Simulation design whose true nuisances replace the fitted ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleChoice {
    pub dgp: String,
    pub gamma: f64,
    #[serde(default = "default_d")]
    pub d: usize,
    /// Seed the data were simulated with (fixes the design direction).
    #[serde(default)]
    pub seed: u64,
}

fn default_d() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NuisanceConfig {
    pub clip: f64,
    /// Logistic penalty; unset uses `1/n` of the nuisance half.
    pub l2: Option<f64>,
    /// Candidate bandwidths, multiplied by `√d`.
    pub bandwidth_grid: Vec<f64>,
    pub oracle: Option<OracleChoice>,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        NuisanceConfig {
            clip: DEFAULT_CLIP,
            l2: None,
            bandwidth_grid: vec![0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0],
            oracle: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnsConfig {
    pub outcome: String,
    pub treatment: String,
    pub covariates: Option<Vec<String>>,
}

impl Default for ColumnsConfig {
    fn default() -> Self {
        ColumnsConfig {
            outcome: "y".into(),
            treatment: "a".into(),
            covariates: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ModelKind {
    Lin,
    Rff,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdTheorem,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum GradChoice {
    Dr,
    Ipw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum SamplerChoice {
    Uniform,
    Unconditional,
    Conditional,
}

impl SamplerChoice {
    pub fn sampler(self) -> Y0Sampler {
        match self {
            SamplerChoice::Uniform => Y0Sampler::uniform_default(),
            SamplerChoice::Unconditional => Y0Sampler::Unconditional,
            SamplerChoice::Conditional => Y0Sampler::Conditional,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub seed: u64,
    pub model: ModelKind,
    pub rff_features: usize,
    pub rff_lengthscale: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub optimizer: OptimizerKind,
    pub grad: GradChoice,
    pub lr: f64,
    pub iters: usize,
    pub lr_grid: Option<Vec<f64>>,
    pub lr_decay: Option<f64>,
    /// Passes over the data for the theorem schedule.
    pub epochs: usize,
    pub sampler: SamplerChoice,
    pub trim: f64,
    pub columns: ColumnsConfig,
    pub nuisance: NuisanceConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            data: None,
            out: None,
            report: None,
            seed: 0,
            model: ModelKind::Lin,
            rff_features: 100,
            rff_lengthscale: 1.0,
            hidden: vec![20, 20],
            activation: Activation::Relu,
            optimizer: OptimizerKind::Adam,
            grad: GradChoice::Dr,
            lr: 0.1,
            iters: 1000,
            lr_grid: None,
            lr_decay: None,
            epochs: 1,
            sampler: SamplerChoice::Unconditional,
            trim: cqc_core::objective::DEFAULT_TRIM,
            columns: ColumnsConfig::default(),
            nuisance: NuisanceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateConfig {
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub sampler: SamplerChoice,
    pub trim: f64,
    /// Fresh evaluation points for the MAE when an oracle design is given.
    pub eval_points: usize,
    pub columns: ColumnsConfig,
    pub nuisance: NuisanceConfig,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        ValidateConfig {
            model: None,
            data: None,
            out: None,
            seed: 0,
            sampler: SamplerChoice::Unconditional,
            trim: cqc_core::objective::DEFAULT_TRIM,
            eval_points: 2000,
            columns: ColumnsConfig::default(),
            nuisance: NuisanceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeltaConfig {
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Parameter table for affine linear models; defaults to `<out>.params.csv`.
    pub table: Option<PathBuf>,
    /// Covariate index swept along the surface.
    pub axis: usize,
    pub x_lo: f64,
    pub x_hi: f64,
    pub x_points: usize,
    pub y0_lo: f64,
    pub y0_hi: f64,
    pub y0_points: usize,
    /// Values of the other covariates; zeros when unset.
    pub x_fixed: Option<Vec<f64>>,
    /// Covariate names for the parameter table.
    pub names: Option<Vec<String>>,
}

impl Default for DeltaConfig {
    fn default() -> Self {
        DeltaConfig {
            model: None,
            out: None,
            table: None,
            axis: 0,
            x_lo: -2.0,
            x_hi: 2.0,
            x_points: 41,
            y0_lo: -2.0,
            y0_hi: 2.0,
            y0_points: 41,
            x_fixed: None,
            names: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub jobs: Option<usize>,
    pub plan: ExperimentPlan,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            out_dir: PathBuf::from("experiment"),
            jobs: None,
            plan: ExperimentPlan::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum AxisChoice {
    Slope,
    NuisanceNoise,
    SampleSize,
    Lr,
    Y0Sampler,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum TargetChoice {
    Propensity,
    Ccdf0,
    Ccdf1,
    Ccdf,
    All,
}

pub fn expand_targets(t: &[TargetChoice]) -> Vec<NoiseTarget> {
    let mut out = Vec::new();
    let mut push = |x: NoiseTarget| {
        if !out.contains(&x) {
            out.push(x);
        }
    };
    for c in t {
        match c {
            TargetChoice::Propensity => push(NoiseTarget::Propensity),
            TargetChoice::Ccdf0 => push(NoiseTarget::Ccdf0),
            TargetChoice::Ccdf1 => push(NoiseTarget::Ccdf1),
            TargetChoice::Ccdf => {
                push(NoiseTarget::Ccdf0);
                push(NoiseTarget::Ccdf1);
            }
            TargetChoice::All => {
                push(NoiseTarget::Propensity);
                push(NoiseTarget::Ccdf0);
                push(NoiseTarget::Ccdf1);
            }
        }
    }
    out
}

/// Builds an axis from a kind and comma-separated values. Noise targets
/// and bias are kept from `current` when it is already a noise axis.
pub fn build_axis(
    kind: AxisChoice,
    values: &[String],
    targets: Option<Vec<NoiseTarget>>,
    bias: Option<f64>,
    current: &Axis,
) -> CliResult<Axis> {
    let floats = || -> CliResult<Vec<f64>> {
        values
            .iter()
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| CliError::Config(format!("axis value `{v}` is not a number")))
            })
            .collect()
    };
    Ok(match kind {
        AxisChoice::Slope => Axis::Slope { gammas: floats()? },
        AxisChoice::Lr => Axis::LrSweep { lrs: floats()? },
        AxisChoice::SampleSize => Axis::SampleSize {
            ns: values
                .iter()
                .map(|v| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|_| CliError::Config(format!("sample size `{v}` is not an integer")))
                })
                .collect::<CliResult<_>>()?,
        },
        AxisChoice::NuisanceNoise => {
            let (t0, b0) = match current {
                Axis::NuisanceNoise { targets, bias, .. } => (targets.clone(), *bias),
                _ => (vec![NoiseTarget::Propensity, NoiseTarget::Ccdf0, NoiseTarget::Ccdf1], 1.0),
            };
            Axis::NuisanceNoise {
                levels: floats()?,
                targets: targets.unwrap_or(t0),
                bias: bias.unwrap_or(b0),
            }
        }
        AxisChoice::Y0Sampler => Axis::Y0SamplerSweep {
            samplers: values
                .iter()
                .map(|v| match v.trim() {
                    "uniform" => Ok(Y0Sampler::uniform_default()),
                    "unconditional" => Ok(Y0Sampler::Unconditional),
                    "conditional" => Ok(Y0Sampler::Conditional),
                    other => Err(CliError::Config(format!(
                        "unknown sampler `{other}`; expected uniform, unconditional or conditional"
                    ))),
                })
                .collect::<CliResult<_>>()?,
        },
    })
}
