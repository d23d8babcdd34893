use serde::{Deserialize, Serialize};

use super::bootstrap::{bootstrap_robustness, BootstrapReport};
use super::experiments::{
    brute_force_allocation, external_ft_experiment, run_estimator_comparison, BruteForceResult, ComparisonTable,
    ExternalReport,
};
use super::world::SyntheticWorld;
use crate::data::RngSeed;
use crate::error::{Error, Result};
use crate::stats::round_sig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveSpec {
    pub grid_step: f64,
    pub replicates: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonSpec {
    pub replicates: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapSpec {
    pub b_d: usize,
    pub b_eps: usize,
    pub n_fit: usize,
    pub resamples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalSpec {
    pub strength: f64,
    pub replicates: usize,
}

/// A simulation run read from JSON. Each optional section produces one CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub world: SyntheticWorld,
    pub n: usize,
    pub m: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub allocation_curve: Option<CurveSpec>,
    #[serde(default)]
    pub comparison: Option<ComparisonSpec>,
    #[serde(default)]
    pub bootstrap: Option<BootstrapSpec>,
    #[serde(default)]
    pub external: Option<ExternalSpec>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text)?;
        s.world.validate()?;
        if s.n < 2 || s.m < 1 {
            return Err(Error::InvalidParameter("scenario needs n >= 2 and m >= 1".into()));
        }
        Ok(s)
    }
}

/// Results of [`run_scenario`], one per requested section.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOutput {
    pub allocation_curve: Option<BruteForceResult>,
    pub comparison: Option<ComparisonTable>,
    pub bootstrap: Option<BootstrapReport>,
    pub external: Option<ExternalReport>,
}

/// Runs every section of `scenario`. The scenario seed, when present,
/// overrides `default_seed`.
pub fn run_scenario(scenario: &Scenario, default_seed: RngSeed) -> Result<ScenarioOutput> {
    let seed = scenario.seed.map(RngSeed).unwrap_or(default_seed);
    let (w, n, m) = (&scenario.world, scenario.n, scenario.m);
    Ok(ScenarioOutput {
        allocation_curve: scenario
            .allocation_curve
            .map(|c| brute_force_allocation(w, n, m, c.grid_step, c.replicates, seed.derive(1)))
            .transpose()?,
        comparison: scenario
            .comparison
            .map(|c| run_estimator_comparison(w, n, m, c.replicates, seed.derive(2)))
            .transpose()?,
        bootstrap: scenario
            .bootstrap
            .map(|b| bootstrap_robustness(w, b.b_d, b.b_eps, b.n_fit, b.resamples, seed.derive(3)))
            .transpose()?,
        external: scenario
            .external
            .map(|e| external_ft_experiment(w, e.strength, n, m, e.replicates, seed.derive(4)))
            .transpose()?,
    })
}

/// Formats with 12 significant digits.
pub fn fmt_num(x: f64) -> String {
    format!("{}", round_sig(x, 12))
}

fn to_csv(header: &[&str], rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    for r in rows {
        w.write_record(&r)
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

impl ScenarioOutput {
    /// `(file name, CSV text)` pairs in a fixed order.
    pub fn to_csv_files(&self) -> Result<Vec<(String, String)>> {
        let mut files = Vec::new();
        if let Some(c) = &self.allocation_curve {
            let rows = c
                .curve
                .iter()
                .map(|p| {
                    vec![
                        fmt_num(p.fraction),
                        p.s.to_string(),
                        fmt_num(p.empirical_variance),
                        fmt_num(p.mc_se),
                        fmt_num(p.analytic_variance),
                        fmt_num(p.mean_estimate),
                    ]
                })
                .collect();
            files.push((
                "allocation_curve.csv".to_string(),
                to_csv(
                    &[
                        "fraction",
                        "s",
                        "empirical_variance",
                        "mc_se",
                        "analytic_variance",
                        "mean_estimate",
                    ],
                    rows,
                )?,
            ));
        }
        if let Some(t) = &self.comparison {
            let mut rows: Vec<Vec<String>> = t
                .rows
                .iter()
                .map(|r| {
                    vec![
                        r.method.label().to_string(),
                        fmt_num(r.rmse),
                        fmt_num(r.mae),
                        fmt_num(r.mean_error),
                        fmt_num(r.variance),
                    ]
                })
                .collect();
            for (name, v) in [
                ("variance_reduction", t.variance_reduction),
                ("sample_savings", t.sample_savings),
                ("n_equiv", t.n_equiv),
                ("analytic_reduction", t.analytic_reduction),
                ("analytic_reduction_infinite_m", t.analytic_reduction_infinite_m),
                ("s_star", t.s_star as f64),
            ] {
                rows.push(vec![
                    name.to_string(),
                    fmt_num(v),
                    String::new(),
                    String::new(),
                    String::new(),
                ]);
            }
            files.push((
                "comparison.csv".to_string(),
                to_csv(&["method", "rmse", "mae", "mean_error", "variance"], rows)?,
            ));
        }
        if let Some(b) = &self.bootstrap {
            let rows = [
                ("a", &b.a),
                ("alpha", &b.alpha),
                ("b", &b.b),
                ("fraction", &b.fraction),
                ("r_squared", &b.r_squared),
            ]
            .iter()
            .map(|(name, q)| {
                vec![
                    name.to_string(),
                    fmt_num(q.median),
                    fmt_num(q.ci_low),
                    fmt_num(q.ci_high),
                    fmt_num(q.decomposition.data_sampling_part),
                    fmt_num(q.decomposition.training_randomness_part),
                    fmt_num(q.decomposition.total),
                ]
            })
            .collect();
            files.push((
                "bootstrap.csv".to_string(),
                to_csv(
                    &[
                        "quantity",
                        "median",
                        "ci_low",
                        "ci_high",
                        "data_sampling_part",
                        "training_randomness_part",
                        "total_variance",
                    ],
                    rows,
                )?,
            ));
        }
        if let Some(e) = &self.external {
            let fields = [
                ("strength", e.strength),
                ("shifted_b", e.shifted_law.b),
                ("baseline_fraction", e.baseline_fraction),
                ("shifted_fraction", e.shifted_fraction),
                ("s_star", e.s_star as f64),
                ("mean_estimate", e.mean_estimate),
                ("mc_se", e.mc_se),
                ("bias_z", e.bias_z),
                ("empirical_variance", e.empirical_variance),
                ("analytic_variance", e.analytic_variance),
            ];
            let rows = fields.iter().map(|(k, v)| vec![k.to_string(), fmt_num(*v)]).collect();
            files.push(("external.csv".to_string(), to_csv(&["field", "value"], rows)?));
        }
        Ok(files)
    }
}
