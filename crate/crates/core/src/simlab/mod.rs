//! Simulation designs with closed-form oracles, replicated experiments and
//! error metrics.

mod dgp;
mod experiment;

pub use dgp::{generate, DgpKind, DgpSpec, REGISTRY};
pub use experiment::{
    aggregate_csv, eval_points, fit_estimated_nuisances, gaussian_pointwise_loss, mae, population_excess_loss,
    results_csv, run_experiment, summarize, Axis, DesignChoice, ExperimentOutput, ExperimentPlan, MethodKind,
    MethodTag, MetricsRecord, NuisanceMode, ResultRow, Settings,
};
