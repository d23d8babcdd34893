use rayon::prelude::*;
use serde::Serialize;

use super::world::SyntheticWorld;
use crate::allocate::solve_optimal_allocation;
use crate::data::{random_permutation, LabeledDataset, RngSeed, Trainer};
use crate::error::{Error, Result};
use crate::ppi_mean::{ft_only_estimate, Method, PpiMeanInputs};
use crate::scaling::ScalingLaw;
use crate::stats::{mean, pairwise_sum, sample_variance};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub fraction: f64,
    pub s: usize,
    /// Replicate variance of the rectified estimate.
    pub empirical_variance: f64,
    /// Monte-Carlo standard error of `empirical_variance`.
    pub mc_se: f64,
    /// `law(s)/(n-s) + Var(f)/m`.
    pub analytic_variance: f64,
    pub mean_estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BruteForceResult {
    pub best_fraction: f64,
    pub curve: Vec<CurvePoint>,
    pub replicates: usize,
}

/// Interior grid `{step, 2*step, ...} ∩ (0, 1)`.
pub fn fraction_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step < 0.5) {
        return Err(Error::InvalidParameter(format!(
            "grid step must lie in (0, 0.5), got {step}"
        )));
    }
    let count = ((1.0 - 1e-9) / step).floor() as usize;
    Ok((1..=count)
        .map(|k| k as f64 * step)
        .filter(|&f| f < 1.0 - 1e-9)
        .collect())
}

/// Per-replicate seeds for data, split and training.
fn replicate_seeds(seed: RngSeed, r: usize) -> (RngSeed, RngSeed, RngSeed) {
    let base = seed.derive(r as u64);
    (base.derive(0), base.derive(1), base.derive(2))
}

/// Runs the split, train and rectify pipeline for every grid fraction.
///
/// Each replicate draws one dataset and one permutation; fine-tuning sets
/// are nested prefixes of that permutation, so the fractions are compared
/// on common data.
pub fn brute_force_allocation(
    world: &SyntheticWorld,
    n: usize,
    m: usize,
    grid_step: f64,
    replicates: usize,
    seed: RngSeed,
) -> Result<BruteForceResult> {
    if replicates < 2 {
        return Err(Error::InvalidParameter("need at least 2 replicates".into()));
    }
    let grid = fraction_grid(grid_step)?;
    let sizes: Vec<usize> = grid.iter().map(|f| (f * n as f64).round() as usize).collect();
    if sizes.iter().any(|&s| s == 0 || s + 2 > n) {
        return Err(Error::InvalidParameter(format!(
            "budget n = {n} too small for grid step {grid_step}"
        )));
    }

    let per_rep: Vec<Vec<f64>> = (0..replicates)
        .into_par_iter()
        .map(|r| -> Result<Vec<f64>> {
            let (data_seed, split_seed, train_seed) = replicate_seeds(seed, r);
            let (labeled, pool) = world.generate(n, m, data_seed)?;
            let perm = random_permutation(n, split_seed);
            let trainer = world.trainer(train_seed);
            sizes
                .iter()
                .map(|&s| {
                    let f = trainer.train(&labeled.subset(&perm[..s]))?;
                    PpiMeanInputs::from_predictor(&labeled.subset(&perm[s..]), &pool, &f)?.estimate()
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut curve = Vec::with_capacity(grid.len());
    for (k, (&fraction, &s)) in grid.iter().zip(&sizes).enumerate() {
        let est: Vec<f64> = per_rep.iter().map(|row| row[k]).collect();
        let var = sample_variance(&est)?;
        curve.push(CurvePoint {
            fraction,
            s,
            empirical_variance: var,
            mc_se: var * (2.0 / (replicates - 1) as f64).sqrt(),
            analytic_variance: world.law.variance_at(s as f64) / (n - s) as f64
                + world.prediction_variance(&world.law, s as f64) / m as f64,
            mean_estimate: mean(&est)?,
        });
    }
    let best_fraction = curve
        .iter()
        .min_by(|p, q| p.empirical_variance.total_cmp(&q.empirical_variance))
        .map(|p| p.fraction)
        .expect("grid is nonempty");
    Ok(BruteForceResult {
        best_fraction,
        curve,
        replicates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodRow {
    pub method: Method,
    pub rmse: f64,
    pub mae: f64,
    pub mean_error: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub n: usize,
    pub m: usize,
    pub s_star: usize,
    pub rows: Vec<MethodRow>,
    /// `1 - Var(FT+PPI) / Var(sample mean)` from the replicates.
    pub variance_reduction: f64,
    /// `1 - n / n_equiv`, the labeled budget saved at equal variance.
    pub sample_savings: f64,
    /// Sample-mean budget matching the rectified variance.
    pub n_equiv: f64,
    /// Closed form including the unlabeled-pool term.
    pub analytic_reduction: f64,
    /// Closed form as the pool grows without bound.
    pub analytic_reduction_infinite_m: f64,
}

impl ComparisonTable {
    pub fn row(&self, method: Method) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

fn summarize(method: Method, estimates: &[f64], truth: f64) -> Result<MethodRow> {
    let err: Vec<f64> = estimates.iter().map(|e| e - truth).collect();
    let sq: Vec<f64> = err.iter().map(|e| e * e).collect();
    let abs: Vec<f64> = err.iter().map(|e| e.abs()).collect();
    let k = err.len() as f64;
    Ok(MethodRow {
        method,
        rmse: (pairwise_sum(&sq) / k).sqrt(),
        mae: pairwise_sum(&abs) / k,
        mean_error: pairwise_sum(&err) / k,
        variance: sample_variance(estimates)?,
    })
}

/// Rectified estimates at split `s` with predictors from `trainer_for`.
fn ft_ppi_replicates<T, F>(
    world: &SyntheticWorld,
    trainer_for: F,
    s: usize,
    n: usize,
    m: usize,
    replicates: usize,
    seed: RngSeed,
) -> Result<Vec<f64>>
where
    T: Trainer,
    F: Fn(RngSeed) -> Result<T> + Sync,
{
    (0..replicates)
        .into_par_iter()
        .map(|r| {
            let (data_seed, split_seed, train_seed) = replicate_seeds(seed, r);
            let (labeled, pool) = world.generate(n, m, data_seed)?;
            let perm = random_permutation(n, split_seed);
            let f = trainer_for(train_seed)?.train(&labeled.subset(&perm[..s]))?;
            PpiMeanInputs::from_predictor(&labeled.subset(&perm[s..]), &pool, &f)?.estimate()
        })
        .collect()
}

/// Sample mean, FT-only, PPI-only and FT+PPI on the same replicates.
pub fn run_estimator_comparison(
    world: &SyntheticWorld,
    n: usize,
    m: usize,
    replicates: usize,
    seed: RngSeed,
) -> Result<ComparisonTable> {
    if replicates < 2 {
        return Err(Error::InvalidParameter("need at least 2 replicates".into()));
    }
    let s = solve_optimal_allocation(&world.law, n as u64)?.s_star_int as usize;
    let per_rep: Vec<[f64; 4]> = (0..replicates)
        .into_par_iter()
        .map(|r| -> Result<[f64; 4]> {
            let (data_seed, split_seed, train_seed) = replicate_seeds(seed, r);
            let (labeled, pool) = world.generate(n, m, data_seed)?;
            let perm = random_permutation(n, split_seed);
            let f = world.trainer(train_seed).train(&labeled.subset(&perm[..s]))?;
            let ft_ppi = PpiMeanInputs::from_predictor(&labeled.subset(&perm[s..]), &pool, &f)?.estimate()?;
            let sample_mean = mean(labeled.outcomes())?;
            let ft_only = ft_only_estimate(&pool, &f)?;
            let untuned = world.untuned_predictor(train_seed.0);
            let ppi_only = PpiMeanInputs::from_predictor(&labeled, &pool, &untuned)?.estimate()?;
            Ok([sample_mean, ft_only, ppi_only, ft_ppi])
        })
        .collect::<Result<_>>()?;

    let methods = [Method::SampleMean, Method::FtOnly, Method::PpiOnly, Method::FtPpi];
    let rows: Vec<MethodRow> = methods
        .iter()
        .enumerate()
        .map(|(k, &method)| {
            let est: Vec<f64> = per_rep.iter().map(|r| r[k]).collect();
            summarize(method, &est, world.true_mean)
        })
        .collect::<Result<_>>()?;

    let ratio = rows[3].variance / rows[0].variance;
    let nf = n as f64;
    let law_term = world.law.variance_at(s as f64) / (nf - s as f64);
    let pool_term = world.prediction_variance(&world.law, s as f64) / m as f64;
    let mean_var = world.var_y / nf;
    Ok(ComparisonTable {
        n,
        m,
        s_star: s,
        rows,
        variance_reduction: 1.0 - ratio,
        // n_equiv = n / ratio, so 1 - n/n_equiv reduces to 1 - ratio
        sample_savings: 1.0 - ratio,
        n_equiv: nf / ratio,
        analytic_reduction: 1.0 - (law_term + pool_term) / mean_var,
        analytic_reduction_infinite_m: 1.0 - law_term / mean_var,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExternalReport {
    pub strength: f64,
    pub shifted_law: ScalingLaw,
    pub baseline_fraction: f64,
    pub shifted_fraction: f64,
    pub s_star: usize,
    pub mean_estimate: f64,
    pub mc_se: f64,
    /// `(mean_estimate - truth) / mc_se`.
    pub bias_z: f64,
    pub empirical_variance: f64,
    pub analytic_variance: f64,
    pub estimates: Vec<f64>,
}

/// Rectified estimation when extra fine-tuning data, independent of both
/// pools, lowers the noise floor to `b * (1 - strength)`.
pub fn external_ft_experiment(
    world: &SyntheticWorld,
    external_strength: f64,
    n: usize,
    m: usize,
    replicates: usize,
    seed: RngSeed,
) -> Result<ExternalReport> {
    if replicates < 2 {
        return Err(Error::InvalidParameter("need at least 2 replicates".into()));
    }
    let shifted = world.trainer(seed).with_external_data(external_strength)?.law;
    let baseline = solve_optimal_allocation(&world.law, n as u64)?;
    let alloc = solve_optimal_allocation(&shifted, n as u64)?;
    let s = alloc.s_star_int as usize;
    let estimates = ft_ppi_replicates(
        world,
        |ts| world.trainer(ts).with_external_data(external_strength),
        s,
        n,
        m,
        replicates,
        seed,
    )?;
    let mean_estimate = mean(&estimates)?;
    let var = sample_variance(&estimates)?;
    let mc_se = (var / replicates as f64).sqrt();
    Ok(ExternalReport {
        strength: external_strength,
        shifted_law: shifted,
        baseline_fraction: baseline.fraction,
        shifted_fraction: alloc.fraction,
        s_star: s,
        mean_estimate,
        mc_se,
        bias_z: (mean_estimate - world.true_mean) / mc_se,
        empirical_variance: var,
        analytic_variance: shifted.variance_at(s as f64) / (n - s) as f64
            + world.prediction_variance(&shifted, s as f64) / m as f64,
        estimates,
    })
}

/// Rectified estimates at a fixed split, for unbiasedness and coverage
/// studies.
pub fn ft_ppi_estimates(
    world: &SyntheticWorld,
    s: usize,
    n: usize,
    m: usize,
    replicates: usize,
    seed: RngSeed,
) -> Result<Vec<f64>> {
    ft_ppi_replicates(world, |ts| Ok(world.trainer(ts)), s, n, m, replicates, seed)
}

/// Like [`ft_ppi_estimates`] but returns full interval reports.
pub fn ft_ppi_reports(
    world: &SyntheticWorld,
    s: usize,
    n: usize,
    m: usize,
    delta: f64,
    replicates: usize,
    seed: RngSeed,
) -> Result<Vec<crate::ppi_mean::MeanEstimateReport>> {
    (0..replicates)
        .into_par_iter()
        .map(|r| {
            let (data_seed, split_seed, train_seed) = replicate_seeds(seed, r);
            let (labeled, pool) = world.generate(n, m, data_seed)?;
            let perm = random_permutation(n, split_seed);
            let f = world.trainer(train_seed).train(&labeled.subset(&perm[..s]))?;
            PpiMeanInputs::from_predictor(&labeled.subset(&perm[s..]), &pool, &f)?.report(delta, Method::FtPpi)
        })
        .collect()
}

/// Measured residual variance on `validation` of predictors trained on the
/// first `s` rows of `ft_order`, for each `s` in `sizes`.
pub(crate) fn residual_curve(
    trainer: &dyn Trainer,
    data: &LabeledDataset,
    ft_order: &[usize],
    validation: &LabeledDataset,
    sizes: &[usize],
) -> Result<Vec<f64>> {
    sizes
        .iter()
        .map(|&s| {
            let f = trainer.train(&data.subset(&ft_order[..s]))?;
            let r: Vec<f64> = validation.iter().map(|(x, y)| y - f.predict(x)).collect();
            sample_variance(&r)
        })
        .collect()
}
