//! Synthetic worlds whose fine-tuned predictors follow a known scaling law,
//! plus Monte-Carlo oracles built on them.

mod bootstrap;
mod experiments;
mod linear;
mod scenario;
mod world;

pub use bootstrap::{
    bootstrap_robustness, decompose, fit_grid, BootstrapFit, BootstrapReport, QuantitySummary, VarianceDecomposition,
};
pub use experiments::{
    brute_force_allocation, external_ft_experiment, fraction_grid, ft_ppi_estimates, ft_ppi_reports,
    run_estimator_comparison, BruteForceResult, ComparisonTable, CurvePoint, ExternalReport, MethodRow,
};
pub use linear::LinearWorld;
pub use scenario::{
    fmt_num, run_scenario, BootstrapSpec, ComparisonSpec, CurveSpec, ExternalSpec, Scenario, ScenarioOutput,
};
pub use world::{generate_world_data, sim_train, BiasProfile, Population, SimTrainer, SyntheticWorld};
