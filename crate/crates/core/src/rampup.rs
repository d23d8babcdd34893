//! Staged fine-tuning on nested subsets with incremental scaling-law refits.

use serde::{Deserialize, Serialize};

use crate::allocate::solve_optimal_allocation;
use crate::data::{random_permutation, LabeledDataset, Predictor, RngSeed, Trainer, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::ppi_mean::{MeanEstimateReport, Method, PpiMeanInputs};
use crate::scaling::{fit_scaling_law, ScalingLaw, ScalingObservation};
use crate::stats::{mean, sample_variance};

/// Stage sizes and validation budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RampUpPlan {
    /// Held-out validation size; must be 0 in cross-validation mode.
    #[serde(default)]
    pub n_v: usize,
    pub grid: Vec<usize>,
    /// When set, residual variance is estimated by K-fold cross-validation
    /// inside each stage instead of on a held-out set.
    #[serde(default)]
    pub cross_validation_folds: Option<usize>,
}

impl RampUpPlan {
    pub fn new(n_v: usize, grid: Vec<usize>) -> Self {
        Self {
            n_v,
            grid,
            cross_validation_folds: None,
        }
    }

    pub fn cross_validated(grid: Vec<usize>, folds: usize) -> Self {
        Self {
            n_v: 0,
            grid,
            cross_validation_folds: Some(folds),
        }
    }

    pub fn k(&self) -> usize {
        self.grid.len()
    }

    /// Checks the plan against a labeled budget of `n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.grid.len() < 3 {
            return Err(Error::InvalidPlan(format!(
                "need at least 3 stages, got {}",
                self.grid.len()
            )));
        }
        if self.grid[0] == 0 || self.grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidPlan(
                "grid must be positive and strictly increasing".into(),
            ));
        }
        match self.cross_validation_folds {
            None if self.n_v < 2 => {
                return Err(Error::InvalidPlan(format!("n_v must be at least 2, got {}", self.n_v)))
            }
            Some(_) if self.n_v != 0 => {
                return Err(Error::InvalidPlan(
                    "cross-validation mode uses no held-out set; set n_v = 0".into(),
                ))
            }
            Some(k) if k < 2 || k > self.grid[0] => {
                return Err(Error::InvalidPlan(format!(
                    "fold count {k} must lie in [2, n_1 = {}]",
                    self.grid[0]
                )))
            }
            _ => {}
        }
        let n_k = *self.grid.last().expect("nonempty");
        if n_k + self.n_v >= n {
            return Err(Error::InvalidPlan(format!(
                "n_k + n_v = {} must be below n = {n}",
                n_k + self.n_v
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Continue,
    Stop,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRecord {
    pub stage: usize,
    pub n_l: usize,
    pub residual_mean: f64,
    pub residual_variance: f64,
    pub law: Option<ScalingLaw>,
    pub r_squared: Option<f64>,
    pub s_hat: Option<f64>,
    pub observations_used: usize,
    pub decision: Decision,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FinalAllocation {
    pub stage: usize,
    pub s_final: usize,
    pub ppi_subset_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RampUpTrace {
    pub n: usize,
    pub n_v: usize,
    pub stages: Vec<StageRecord>,
    pub final_allocation: Option<FinalAllocation>,
    pub failure: Option<String>,
    /// Held-out validation indices into the labeled data.
    pub validation: Vec<usize>,
    /// `N_k` in subsampling order; stage `l` uses the first `n_l` entries.
    pub ft_order: Vec<usize>,
}

impl RampUpTrace {
    /// Fine-tuning indices of the final stage.
    pub fn ft_indices(&self) -> Option<&[usize]> {
        self.final_allocation.map(|f| &self.ft_order[..f.s_final])
    }

    /// Labeled indices left for rectification, ascending.
    pub fn ppi_indices(&self) -> Option<Vec<usize>> {
        let ft = self.ft_indices()?;
        let mut used = vec![false; self.n];
        for &i in self.validation.iter().chain(ft) {
            used[i] = true;
        }
        Some((0..self.n).filter(|&i| !used[i]).collect())
    }

    pub fn stop_stage(&self) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.decision == Decision::Stop)
    }
}

/// The stopping predicate: stop at stage `stage` of `k` when it is the last
/// stage or the estimated optimum does not exceed the current size.
pub fn should_stop(stage: usize, k: usize, s_hat: Option<f64>, n_l: usize) -> bool {
    stage == k || s_hat.is_some_and(|s| s <= n_l as f64)
}

/// Refit-and-decide bookkeeping shared by live runs and replays.
struct Planner {
    n: u64,
    k: usize,
    obs: Vec<ScalingObservation>,
}

impl Planner {
    fn step(&mut self, stage: usize, n_l: usize, fit_size: u64, mean: f64, var: f64) -> StageRecord {
        let mut rec = StageRecord {
            stage,
            n_l,
            residual_mean: mean,
            residual_variance: var,
            law: None,
            r_squared: None,
            s_hat: None,
            observations_used: 0,
            decision: Decision::Continue,
            error: None,
        };
        let refit = ScalingObservation::new(fit_size, var).and_then(|o| {
            self.obs.push(o);
            rec.observations_used = self.obs.len();
            if self.obs.len() < 3 {
                return Ok(None);
            }
            let fit = fit_scaling_law(&self.obs)?;
            let alloc = solve_optimal_allocation(&fit.law, self.n)?;
            Ok(Some((fit.law, fit.r_squared, alloc.s_star_real)))
        });
        match refit {
            Ok(Some((law, r2, s_hat))) => {
                rec.law = Some(law);
                rec.r_squared = Some(r2);
                rec.s_hat = Some(s_hat);
            }
            Ok(None) => {}
            Err(e) => {
                rec.decision = Decision::Failed;
                rec.error = Some(e.to_string());
                return rec;
            }
        }
        if should_stop(stage, self.k, rec.s_hat, n_l) {
            rec.decision = Decision::Stop;
        }
        rec
    }
}

/// Applies the refit and stopping rule to precomputed `(n_l, variance)`
/// pairs, as if each had been measured at its stage. Stops at the first
/// Stop or Failed record.
pub fn replay_stages(n: usize, pairs: &[(usize, f64)]) -> Vec<StageRecord> {
    let mut planner = Planner {
        n: n as u64,
        k: pairs.len(),
        obs: Vec::new(),
    };
    let mut out = Vec::new();
    for (idx, &(n_l, var)) in pairs.iter().enumerate() {
        let rec = planner.step(idx + 1, n_l, n_l as u64, f64::NAN, var);
        let done = rec.decision != Decision::Continue;
        out.push(rec);
        if done {
            break;
        }
    }
    out
}

fn residual_moments(f: &Predictor, data: &LabeledDataset, rows: &[usize]) -> Result<(f64, f64)> {
    let r: Vec<f64> = rows.iter().map(|&i| data.y(i) - f.predict(data.x(i))).collect();
    Ok((mean(&r)?, sample_variance(&r)?))
}

fn cv_moments(trainer: &dyn Trainer, data: &LabeledDataset, stage_rows: &[usize], folds: usize) -> Result<(f64, f64)> {
    let mut r = Vec::with_capacity(stage_rows.len());
    for j in 0..folds {
        type Rows = Vec<(usize, usize)>;
        let (held, train): (Rows, Rows) = stage_rows
            .iter()
            .copied()
            .enumerate()
            .partition(|(p, _)| p % folds == j);
        let train: Vec<usize> = train.into_iter().map(|(_, i)| i).collect();
        let f = trainer.train(&data.subset(&train))?;
        r.extend(held.into_iter().map(|(_, i)| data.y(i) - f.predict(data.x(i))));
    }
    Ok((mean(&r)?, sample_variance(&r)?))
}

/// Runs the staged procedure on `data`.
///
/// A trainer or fitting failure ends the trace with a `Failed` record and
/// no final allocation.
pub fn run_rampup(
    data: &LabeledDataset,
    plan: &RampUpPlan,
    trainer: &dyn Trainer,
    seed: RngSeed,
) -> Result<RampUpTrace> {
    let n = data.len();
    plan.validate(n)?;
    let k = plan.k();
    let perm = random_permutation(n, seed.derive(0));
    let validation = perm[..plan.n_v].to_vec();
    let n_k = plan.grid[k - 1];
    let mut ft_order = perm[plan.n_v..plan.n_v + n_k].to_vec();
    let shuffle = random_permutation(n_k, seed.derive(1));
    ft_order = shuffle.iter().map(|&p| ft_order[p]).collect();

    let mut planner = Planner {
        n: n as u64,
        k,
        obs: Vec::new(),
    };
    let mut trace = RampUpTrace {
        n,
        n_v: plan.n_v,
        stages: Vec::with_capacity(k),
        final_allocation: None,
        failure: None,
        validation,
        ft_order,
    };
    for (idx, &n_l) in plan.grid.iter().enumerate() {
        let stage = idx + 1;
        let rows = &trace.ft_order[..n_l];
        let measured = match plan.cross_validation_folds {
            None => trainer
                .train(&data.subset(rows))
                .and_then(|f| residual_moments(&f, data, &trace.validation))
                .map(|m| (m, n_l as u64)),
            Some(folds) => cv_moments(trainer, data, rows, folds).map(|m| {
                let train_size = (n_l as f64 * (folds - 1) as f64 / folds as f64).round();
                (m, train_size as u64)
            }),
        };
        let rec = match measured {
            Ok(((mu, var), fit_size)) => planner.step(stage, n_l, fit_size, mu, var),
            Err(e) => StageRecord {
                stage,
                n_l,
                residual_mean: f64::NAN,
                residual_variance: f64::NAN,
                law: None,
                r_squared: None,
                s_hat: None,
                observations_used: planner.obs.len(),
                decision: Decision::Failed,
                error: Some(e.to_string()),
            },
        };
        let decision = rec.decision;
        if decision == Decision::Failed {
            trace.failure = rec.error.clone();
        }
        trace.stages.push(rec);
        match decision {
            Decision::Continue => {}
            Decision::Stop => {
                trace.final_allocation = Some(FinalAllocation {
                    stage,
                    s_final: n_l,
                    ppi_subset_size: n - plan.n_v - n_l,
                });
                break;
            }
            Decision::Failed => break,
        }
    }
    Ok(trace)
}

/// Trains on the final fine-tuning set and rectifies on the remaining
/// labeled rows; the validation set is used for neither.
pub fn rampup_final_estimate(
    trace: &RampUpTrace,
    data: &LabeledDataset,
    unlabeled: &UnlabeledDataset,
    trainer: &dyn Trainer,
    delta: f64,
) -> Result<MeanEstimateReport> {
    if data.len() != trace.n {
        return Err(Error::DimensionMismatch {
            row: 0,
            expected: trace.n,
            found: data.len(),
        });
    }
    let (ft, ppi) = match (trace.ft_indices(), trace.ppi_indices()) {
        (Some(ft), Some(ppi)) => (ft, ppi),
        _ => {
            return Err(Error::InvalidPlan(format!(
                "ramp-up did not complete: {}",
                trace.failure.as_deref().unwrap_or("no stop record")
            )))
        }
    };
    if ppi.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "rectification set has {} rows, need at least 2",
            ppi.len()
        )));
    }
    let f = trainer.train(&data.subset(ft))?;
    PpiMeanInputs::from_predictor(&data.subset(&ppi), unlabeled, &f)?.report(delta, Method::FtPpi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{BiasProfile, SyntheticWorld};
    use proptest::prelude::*;

    fn reference_world() -> SyntheticWorld {
        SyntheticWorld::new(
            88.441,
            9.0,
            1,
            ScalingLaw {
                a: 10.21,
                alpha: 0.21,
                b: 1.98,
            },
            BiasProfile::Zero,
            10,
        )
        .unwrap()
    }

    #[test]
    fn plan_validation() {
        assert!(RampUpPlan::new(10, vec![10, 20]).validate(100).is_err());
        assert!(RampUpPlan::new(10, vec![10, 20, 20]).validate(100).is_err());
        assert!(RampUpPlan::new(1, vec![10, 20, 30]).validate(100).is_err());
        assert!(RampUpPlan::new(10, vec![10, 20, 90]).validate(100).is_err());
        assert!(RampUpPlan::new(10, vec![10, 20, 89]).validate(100).is_ok());
        assert!(RampUpPlan::cross_validated(vec![10, 20, 30], 5).validate(100).is_ok());
        assert!(RampUpPlan::cross_validated(vec![3, 20, 30], 5).validate(100).is_err());
    }

    #[test]
    fn closed_form_world_stops_past_half() {
        let law = ScalingLaw {
            a: 1.0,
            alpha: 1.0,
            b: 0.0,
        };
        let grid = [10usize, 20, 35, 55, 60];
        let pairs: Vec<(usize, f64)> = grid.iter().map(|&s| (s, law.variance_at(s as f64))).collect();
        let recs = replay_stages(100, &pairs);
        let decisions: Vec<Decision> = recs.iter().map(|r| r.decision).collect();
        assert_eq!(
            decisions,
            [
                Decision::Continue,
                Decision::Continue,
                Decision::Continue,
                Decision::Stop
            ]
        );
        assert!(recs[0].s_hat.is_none() && recs[1].s_hat.is_none());
        let s_hat = recs[2].s_hat.unwrap();
        assert!((s_hat - 50.0).abs() < 1e-3, "{s_hat}");
        assert_eq!(recs[3].n_l, 55);
    }

    #[test]
    fn last_stage_always_stops() {
        let law = ScalingLaw {
            a: 10.21,
            alpha: 0.21,
            b: 1.98,
        };
        let pairs: Vec<(usize, f64)> = [10usize, 20, 40]
            .iter()
            .map(|&s| (s, law.variance_at(s as f64)))
            .collect();
        let recs = replay_stages(10_000, &pairs);
        assert_eq!(recs.len(), 3);
        assert!(recs[2].s_hat.unwrap() > 40.0);
        assert_eq!(recs[2].decision, Decision::Stop);
    }

    #[test]
    fn reference_world_recovers_optimum() {
        let world = reference_world();
        let (data, _) = world.generate(10_000, 1, RngSeed(31)).unwrap();
        let plan = RampUpPlan::new(1000, vec![100, 250, 500, 1000, 2000]);
        let trace = run_rampup(&data, &plan, &world.trainer(RngSeed(7)), RngSeed(8)).unwrap();
        let stop = trace.stop_stage().unwrap();
        assert_eq!(trace.stages.iter().filter(|s| s.decision == Decision::Stop).count(), 1);
        let s_hat = stop.s_hat.unwrap();
        assert!((s_hat - 1028.34).abs() < 0.25 * 1028.34, "{s_hat}");
        for rec in &trace.stages {
            let fires = should_stop(rec.stage, plan.k(), rec.s_hat, rec.n_l);
            assert_eq!(fires, rec.decision == Decision::Stop);
            assert_eq!(rec.observations_used, rec.stage);
        }
        let fin = trace.final_allocation.unwrap();
        assert_eq!(trace.ppi_indices().unwrap().len(), fin.ppi_subset_size);
        assert_eq!(fin.ppi_subset_size, 10_000 - 1000 - fin.s_final);
    }

    #[test]
    fn trainer_failure_truncates_trace() {
        let law = ScalingLaw {
            a: 10.21,
            alpha: 0.21,
            b: 1.98,
        };
        let world = SyntheticWorld::new(0.0, 9.0, 1, law, BiasProfile::Zero, 30).unwrap();
        let (data, _) = world.generate(500, 1, RngSeed(1)).unwrap();
        let plan = RampUpPlan::new(50, vec![20, 40, 80]);
        let trace = run_rampup(&data, &plan, &world.trainer(RngSeed(1)), RngSeed(2)).unwrap();
        assert_eq!(trace.stages.len(), 1);
        assert_eq!(trace.stages[0].decision, Decision::Failed);
        assert!(trace.final_allocation.is_none() && trace.failure.is_some());
        let (_, pool) = world.generate(1, 10, RngSeed(3)).unwrap();
        assert!(rampup_final_estimate(&trace, &data, &pool, &world.trainer(RngSeed(1)), 0.05).is_err());
    }

    #[test]
    fn perfect_predictor_interval_comes_from_pool() {
        let law = ScalingLaw {
            a: 1e-12,
            alpha: 1.0,
            b: 0.0,
        };
        let world = SyntheticWorld::new(2.0, 4.0, 1, law, BiasProfile::Zero, 1).unwrap();
        let (data, pool) = world.generate(200, 4000, RngSeed(5)).unwrap();
        let plan = RampUpPlan::new(20, vec![10, 20, 40]);
        let trainer = world.trainer(RngSeed(6));
        let trace = run_rampup(&data, &plan, &trainer, RngSeed(7)).unwrap();
        let rep = rampup_final_estimate(&trace, &data, &pool, &trainer, 0.05).unwrap();
        let pool_var = sample_variance(
            &trainer
                .train(&data.subset(trace.ft_indices().unwrap()))
                .unwrap()
                .predict_unlabeled(&pool),
        )
        .unwrap();
        assert!((rep.variance_hat - pool_var / 4000.0).abs() < 1e-6 * rep.variance_hat);
    }

    #[test]
    fn cross_validation_mode_runs_without_holdout() {
        let world = reference_world();
        let (data, pool) = world.generate(3000, 1000, RngSeed(11)).unwrap();
        let plan = RampUpPlan::cross_validated(vec![100, 200, 400, 800], 5);
        let trainer = world.trainer(RngSeed(12));
        let trace = run_rampup(&data, &plan, &trainer, RngSeed(13)).unwrap();
        assert!(trace.validation.is_empty());
        let fin = trace.final_allocation.unwrap();
        assert_eq!(fin.ppi_subset_size, 3000 - fin.s_final);
        assert!(rampup_final_estimate(&trace, &data, &pool, &trainer, 0.1).is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn nesting_and_disjointness(seed in any::<u64>(), n_v in 2usize..40) {
            let world = reference_world();
            let (data, _) = world.generate(400, 1, RngSeed(seed)).unwrap();
            let plan = RampUpPlan::new(n_v, vec![20, 40, 80, 160]);
            let trace = run_rampup(&data, &plan, &world.trainer(RngSeed(seed)), RngSeed(seed ^ 1)).unwrap();
            let mut seen = vec![false; 400];
            for &i in &trace.validation {
                seen[i] = true;
            }
            prop_assert!(trace.ft_order.iter().all(|&i| !seen[i]));
            let mut ft = trace.ft_order.clone();
            ft.sort_unstable();
            ft.dedup();
            prop_assert_eq!(ft.len(), trace.ft_order.len());
            if let Some(ppi) = trace.ppi_indices() {
                let ft_set = trace.ft_indices().unwrap();
                prop_assert!(ppi.iter().all(|i| !seen[*i] && !ft_set.contains(i)));
                prop_assert_eq!(ppi.len() + n_v + ft_set.len(), 400);
            }
            for rec in &trace.stages {
                prop_assert_eq!(rec.observations_used, rec.stage);
                let fires = should_stop(rec.stage, plan.k(), rec.s_hat, rec.n_l);
                prop_assert_eq!(fires, rec.decision == Decision::Stop);
            }
        }
    }
}
