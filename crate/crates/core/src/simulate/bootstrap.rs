use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::experiments::residual_curve;
use super::world::SyntheticWorld;
use crate::allocate::solve_optimal_allocation;
use crate::data::{random_permutation, RngSeed};
use crate::error::{Error, Result};
use crate::scaling::{fit_scaling_law, ScalingObservation};
use crate::stats::{median, percentile_sorted, population_variance};

/// One refit under dataset `dataset` and training seed `seed_index`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BootstrapFit {
    pub dataset: usize,
    pub seed_index: usize,
    pub a: f64,
    pub alpha: f64,
    pub b: f64,
    pub fraction: f64,
    pub r_squared: f64,
}

/// Between/within split of the replicate variance (population divisors).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceDecomposition {
    /// Variance of the per-dataset means.
    pub data_sampling_part: f64,
    /// Mean of the per-dataset variances across training seeds.
    pub training_randomness_part: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuantitySummary {
    pub median: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub decomposition: VarianceDecomposition,
}

impl QuantitySummary {
    pub fn width(&self) -> f64 {
        self.ci_high - self.ci_low
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapReport {
    pub a: QuantitySummary,
    pub alpha: QuantitySummary,
    pub b: QuantitySummary,
    pub fraction: QuantitySummary,
    pub r_squared: QuantitySummary,
    /// Decomposition for the optimal fraction.
    pub var_decomposition: VarianceDecomposition,
    pub fits: Vec<BootstrapFit>,
    pub fit_sizes: Vec<u64>,
    pub resamples: usize,
}

/// Geometric fine-tuning sizes from 50 up to `max`.
pub fn fit_grid(max: usize) -> Vec<u64> {
    let lo = 50.0f64.min(max as f64 / 8.0).max(1.0);
    let hi = max as f64;
    let mut out: Vec<u64> = (0..8)
        .map(|k| (lo * (hi / lo).powf(k as f64 / 7.0)).round() as u64)
        .collect();
    out.dedup();
    out
}

pub fn decompose(values: &[f64], groups: usize) -> VarianceDecomposition {
    let per = values.len() / groups;
    let means: Vec<f64> = values
        .chunks_exact(per)
        .map(|g| crate::stats::pairwise_sum(g) / per as f64)
        .collect();
    let within: Vec<f64> = values.chunks_exact(per).map(population_variance).collect();
    VarianceDecomposition {
        data_sampling_part: population_variance(&means),
        training_randomness_part: crate::stats::pairwise_sum(&within) / groups as f64,
        total: population_variance(values),
    }
}

/// Two-level robustness analysis of the fitted law and optimal fraction.
///
/// Each of `b_d` datasets of size `n_fit` is split once into a validation
/// half and a fine-tuning half; predictors at the sizes of [`fit_grid`] are
/// trained under `b_eps` seeds and scored on the validation half, the law
/// is refit, and the optimal fraction at `n_fit` recorded. Medians of
/// `resamples` bootstrap draws of the pooled fits give percentile intervals.
pub fn bootstrap_robustness(
    world: &SyntheticWorld,
    b_d: usize,
    b_eps: usize,
    n_fit: usize,
    resamples: usize,
    seed: RngSeed,
) -> Result<BootstrapReport> {
    if b_d < 2 || b_eps < 2 {
        return Err(Error::InvalidParameter(
            "bootstrap needs at least 2 datasets and 2 training seeds".into(),
        ));
    }
    if resamples == 0 {
        return Err(Error::InvalidParameter("resamples must be positive".into()));
    }
    let half = n_fit / 2;
    let sizes = fit_grid(half);
    if sizes.len() < 3 || half < 2 || sizes[0] < world.s_min {
        return Err(Error::InvalidParameter(format!(
            "n_fit = {n_fit} too small for a scaling-law refit"
        )));
    }
    let sizes_usize: Vec<usize> = sizes.iter().map(|&s| s as usize).collect();

    let fits: Vec<BootstrapFit> = (0..b_d * b_eps)
        .into_par_iter()
        .map(|k| -> Result<BootstrapFit> {
            let (d, e) = (k / b_eps, k % b_eps);
            let ds = seed.derive(d as u64);
            let (data, _) = world.generate(n_fit, 0, ds.derive(0))?;
            let perm = random_permutation(n_fit, ds.derive(1));
            let validation = data.subset(&perm[..half]);
            let trainer = world.trainer(ds.derive(2).derive(e as u64));
            let vars = residual_curve(&trainer, &data, &perm[half..], &validation, &sizes_usize)?;
            let obs: Vec<ScalingObservation> = sizes
                .iter()
                .zip(&vars)
                .map(|(&s, &v)| ScalingObservation::new(s, v))
                .collect::<Result<_>>()?;
            let fit = fit_scaling_law(&obs)?;
            let alloc = solve_optimal_allocation(&fit.law, n_fit as u64)?;
            Ok(BootstrapFit {
                dataset: d,
                seed_index: e,
                a: fit.law.a,
                alpha: fit.law.alpha,
                b: fit.law.b,
                fraction: alloc.fraction,
                r_squared: fit.r_squared,
            })
        })
        .collect::<Result<_>>()?;

    let total = fits.len();
    let mut rng = seed.derive(u64::MAX).rng();
    let draws: Vec<Vec<usize>> = (0..resamples)
        .map(|_| (0..total).map(|_| rng.random_range(0..total)).collect())
        .collect();

    let summarize = |get: fn(&BootstrapFit) -> f64| -> QuantitySummary {
        let values: Vec<f64> = fits.iter().map(get).collect();
        let mut medians: Vec<f64> = draws
            .iter()
            .map(|idx| median(&idx.iter().map(|&i| values[i]).collect::<Vec<_>>()))
            .collect();
        medians.sort_by(|a, b| a.total_cmp(b));
        QuantitySummary {
            median: median(&values),
            ci_low: percentile_sorted(&medians, 0.025),
            ci_high: percentile_sorted(&medians, 0.975),
            decomposition: decompose(&values, b_d),
        }
    };
    let fraction = summarize(|f| f.fraction);
    Ok(BootstrapReport {
        a: summarize(|f| f.a),
        alpha: summarize(|f| f.alpha),
        b: summarize(|f| f.b),
        r_squared: summarize(|f| f.r_squared),
        var_decomposition: fraction.decomposition,
        fraction,
        fits,
        fit_sizes: sizes,
        resamples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scaling::ScalingLaw;
    use crate::simulate::world::BiasProfile;
    use proptest::prelude::*;

    fn world() -> SyntheticWorld {
        SyntheticWorld::new(
            0.0,
            9.0,
            1,
            ScalingLaw {
                a: 11.403,
                alpha: 0.261,
                b: 2.447,
            },
            BiasProfile::Zero,
            10,
        )
        .unwrap()
    }

    #[test]
    fn grid_is_geometric_and_capped() {
        let g = fit_grid(2500);
        assert_eq!(g.len(), 8);
        assert_eq!(g[0], 50);
        assert_eq!(*g.last().unwrap(), 2500);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn noiseless_training_has_no_training_part() {
        let quiet = world().with_training_noise(false);
        let r = bootstrap_robustness(&quiet, 3, 2, 2000, 100, RngSeed(1)).unwrap();
        assert_eq!(r.var_decomposition.training_randomness_part, 0.0);
        assert!(r.var_decomposition.data_sampling_part > 0.0);
    }

    #[test]
    fn report_is_deterministic() {
        let a = bootstrap_robustness(&world(), 2, 2, 1000, 50, RngSeed(3)).unwrap();
        let b = bootstrap_robustness(&world(), 2, 2, 1000, 50, RngSeed(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.fraction.ci_low <= a.fraction.ci_high);
        assert_eq!(a.fits.len(), 4);
    }

    #[test]
    fn rejects_single_dataset() {
        assert!(bootstrap_robustness(&world(), 1, 2, 1000, 10, RngSeed(3)).is_err());
    }

    proptest! {
        #[test]
        fn decomposition_sums_to_total(
            values in proptest::collection::vec(-1e3f64..1e3, 2..8usize).prop_flat_map(|g| {
                proptest::collection::vec(-1e3f64..1e3, g.len() * 3)
            })
        ) {
            let d = decompose(&values, values.len() / 3);
            prop_assert!(d.data_sampling_part >= 0.0 && d.training_randomness_part >= 0.0);
            let sum = d.data_sampling_part + d.training_randomness_part;
            prop_assert!((sum - d.total).abs() <= 1e-9 * d.total.max(1.0));
        }
    }
}
