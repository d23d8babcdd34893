//! Fine-tune-then-rectify sample allocation for prediction-powered inference.
//!
//! A small labeled budget `n` is split into `s` samples used to fine-tune a
//! surrogate predictor and `n - s` samples used to rectify its predictions on
//! a large unlabeled pool. This crate fits the residual-variance scaling law
//! `a * s^(-alpha) + b`, solves for the variance-minimizing split, computes
//! rectified estimates and confidence intervals for means and general
//! M-estimation targets, and ships simulators that check every rule against
//! brute-force oracles.

pub mod allocate;
pub mod data;
pub mod error;
pub mod m_estim;
pub mod ppi_mean;
pub mod rampup;
pub mod scaling;
pub mod simulate;
pub mod stats;

pub use allocate::{
    allocation_sensitivity, check_feasibility, foc_residual, solve_optimal_allocation, solve_with_feasibility,
    variance_discriminant, AllocationResult, FeasibilityInput, FeasibilityReport, SensitivityReport,
};
pub use data::{
    read_labeled_csv, read_predictions_csv, read_unlabeled_csv, split_dataset, LabeledDataset, LabeledSample,
    Predictor, RngSeed, Trainer, UnlabeledDataset,
};
pub use error::{Error, Result};
pub use m_estim::{
    builtin_loss, m_estimate_ci, sandwich_covariance, scalarize, solve_ppi_m_estimator, LossKind, LossModel,
    MEstimateReport, MEstimationData, SandwichCovariance, ScalarMode,
};
pub use ppi_mean::{MeanEstimateReport, Method, PpiMeanInputs, R2Criterion};
pub use rampup::{rampup_final_estimate, replay_stages, run_rampup, Decision, RampUpPlan, RampUpTrace, StageRecord};
pub use scaling::{fit_scaling_law, ScalingFit, ScalingLaw, ScalingObservation};
pub use simulate::{BiasProfile, SimTrainer, SyntheticWorld};
pub use stats::sample_variance;
