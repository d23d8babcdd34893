//! Rectified mean estimation and its baselines.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Predictor, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::stats::{pairwise_sum, sample_variance, z_two_sided};

/// Below this many rectification samples the normal interval is flagged.
pub const SMALL_SAMPLE: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    SampleMean,
    FtOnly,
    PpiOnly,
    FtPpi,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::SampleMean => "sample_mean",
            Method::FtOnly => "ft_only",
            Method::PpiOnly => "ppi_only",
            Method::FtPpi => "ft_ppi",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanEstimateReport {
    pub method: Method,
    pub estimate: f64,
    pub variance_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub delta: f64,
    pub n_ppi: usize,
    pub m: usize,
    pub small_sample_warning: bool,
}

impl MeanEstimateReport {
    fn with_interval(
        method: Method,
        estimate: f64,
        variance_hat: f64,
        delta: f64,
        n_ppi: usize,
        m: usize,
    ) -> Result<Self> {
        let half = z_two_sided(delta)? * variance_hat.max(0.0).sqrt();
        Ok(Self {
            method,
            estimate,
            variance_hat,
            ci_low: estimate - half,
            ci_high: estimate + half,
            delta,
            n_ppi,
            m,
            small_sample_warning: n_ppi < SMALL_SAMPLE,
        })
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.ci_high - self.ci_low)
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci_low <= truth && truth <= self.ci_high
    }
}

/// Sample variances entering the rectified-mean variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceParts {
    pub sigma_resid_sq: f64,
    pub sigma_f_sq: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct R2Criterion {
    pub r2_s: f64,
    pub fraction: f64,
    pub gain: f64,
}

/// Labels and cached predictions for one rectification problem.
#[derive(Debug, Clone, PartialEq)]
pub struct PpiMeanInputs {
    labels: Vec<f64>,
    preds_labeled: Vec<f64>,
    preds_unlabeled: Vec<f64>,
}

impl PpiMeanInputs {
    /// Evaluates `f` once on every labeled and unlabeled feature vector.
    pub fn from_predictor(labeled_ppi: &LabeledDataset, unlabeled: &UnlabeledDataset, f: &Predictor) -> Result<Self> {
        if labeled_ppi.dim() != unlabeled.dim() {
            return Err(Error::DimensionMismatch {
                row: 0,
                expected: labeled_ppi.dim(),
                found: unlabeled.dim(),
            });
        }
        let preds_labeled = labeled_ppi
            .features()
            .par_chunks_exact(labeled_ppi.dim())
            .map(|x| f.predict(x))
            .collect();
        let preds_unlabeled = unlabeled
            .iter()
            .collect::<Vec<_>>()
            .par_iter()
            .map(|x| f.predict(x))
            .collect();
        Self::from_predictions(labeled_ppi.outcomes().to_vec(), preds_labeled, preds_unlabeled)
    }

    /// Uses precomputed predictions, e.g. from an external model.
    pub fn from_predictions(labels: Vec<f64>, preds_labeled: Vec<f64>, preds_unlabeled: Vec<f64>) -> Result<Self> {
        if labels.len() != preds_labeled.len() {
            return Err(Error::DimensionMismatch {
                row: labels.len().min(preds_labeled.len()),
                expected: labels.len(),
                found: preds_labeled.len(),
            });
        }
        for v in [&labels, &preds_labeled, &preds_unlabeled] {
            if let Some(row) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite { row });
            }
        }
        Ok(Self {
            labels,
            preds_labeled,
            preds_unlabeled,
        })
    }

    pub fn n_ppi(&self) -> usize {
        self.labels.len()
    }

    pub fn m(&self) -> usize {
        self.preds_unlabeled.len()
    }

    pub fn residuals(&self) -> Vec<f64> {
        self.labels
            .iter()
            .zip(&self.preds_labeled)
            .map(|(y, f)| y - f)
            .collect()
    }

    pub fn preds_unlabeled(&self) -> &[f64] {
        &self.preds_unlabeled
    }

    /// `mean(Y - f(X))` over the labeled part plus `mean(f)` over the pool.
    pub fn estimate(&self) -> Result<f64> {
        if self.labels.is_empty() || self.preds_unlabeled.is_empty() {
            return Err(Error::InsufficientData(
                "rectified mean needs at least one labeled and one unlabeled sample".into(),
            ));
        }
        let rectifier = pairwise_sum(&self.residuals()) / self.n_ppi() as f64;
        let pred_mean = pairwise_sum(&self.preds_unlabeled) / self.m() as f64;
        Ok(rectifier + pred_mean)
    }

    pub fn variance_hat(&self) -> Result<VarianceParts> {
        let sigma_resid_sq = sample_variance(&self.residuals())?;
        let sigma_f_sq = sample_variance(&self.preds_unlabeled)?;
        Ok(VarianceParts {
            sigma_resid_sq,
            sigma_f_sq,
            total: sigma_resid_sq / self.n_ppi() as f64 + sigma_f_sq / self.m() as f64,
        })
    }

    /// Normal interval around the rectified mean, tagged with `method`.
    pub fn report(&self, delta: f64, method: Method) -> Result<MeanEstimateReport> {
        z_two_sided(delta)?;
        let estimate = self.estimate()?;
        let parts = self.variance_hat()?;
        MeanEstimateReport::with_interval(method, estimate, parts.total, delta, self.n_ppi(), self.m())
    }
}

pub fn ppi_mean_estimate(labeled_ppi: &LabeledDataset, unlabeled: &UnlabeledDataset, f: &Predictor) -> Result<f64> {
    PpiMeanInputs::from_predictor(labeled_ppi, unlabeled, f)?.estimate()
}

pub fn ppi_mean_variance_hat(
    labeled_ppi: &LabeledDataset,
    unlabeled: &UnlabeledDataset,
    f: &Predictor,
) -> Result<VarianceParts> {
    PpiMeanInputs::from_predictor(labeled_ppi, unlabeled, f)?.variance_hat()
}

pub fn ppi_mean_ci(
    labeled_ppi: &LabeledDataset,
    unlabeled: &UnlabeledDataset,
    f: &Predictor,
    delta: f64,
) -> Result<MeanEstimateReport> {
    PpiMeanInputs::from_predictor(labeled_ppi, unlabeled, f)?.report(delta, Method::FtPpi)
}

/// `R^2(s) = 1 - resid/var_y` and its margin over the fraction `s/n`.
pub fn r2_criterion(sigma_resid_sq: f64, var_y: f64, s: u64, n: u64) -> Result<R2Criterion> {
    if var_y.is_nan() || var_y <= 0.0 {
        return Err(Error::Domain(format!("var_y must be positive, got {var_y}")));
    }
    if s == 0 || s >= n {
        return Err(Error::InvalidSplit {
            s: s as usize,
            n: n as usize,
        });
    }
    let r2_s = 1.0 - sigma_resid_sq / var_y;
    let fraction = s as f64 / n as f64;
    Ok(R2Criterion {
        r2_s,
        fraction,
        gain: r2_s - fraction,
    })
}

pub fn sample_mean_estimate(labeled: &LabeledDataset, delta: f64) -> Result<MeanEstimateReport> {
    z_two_sided(delta)?;
    let y = labeled.outcomes();
    if y.len() < 2 {
        return Err(Error::InsufficientData(
            "sample mean interval needs at least 2 labels".into(),
        ));
    }
    let n = y.len();
    let mean = pairwise_sum(y) / n as f64;
    let var = sample_variance(y)? / n as f64;
    MeanEstimateReport::with_interval(Method::SampleMean, mean, var, delta, n, 0)
}

/// Plain average of the predictions on the pool. Not rectified, so biased
/// whenever the predictor is.
pub fn ft_only_estimate(unlabeled: &UnlabeledDataset, f: &Predictor) -> Result<f64> {
    if unlabeled.is_empty() {
        return Err(Error::InsufficientData("empty unlabeled pool".into()));
    }
    let preds: Vec<f64> = unlabeled.iter().map(|x| f.predict(x)).collect();
    Ok(pairwise_sum(&preds) / preds.len() as f64)
}

/// [`ft_only_estimate`] with a naive interval from the prediction spread.
pub fn ft_only_report(unlabeled: &UnlabeledDataset, f: &Predictor, delta: f64) -> Result<MeanEstimateReport> {
    z_two_sided(delta)?;
    let preds = f.predict_unlabeled(unlabeled);
    if preds.len() < 2 {
        return Err(Error::InsufficientData("FT-only interval needs 2 predictions".into()));
    }
    let m = preds.len();
    let mean = pairwise_sum(&preds) / m as f64;
    let var = sample_variance(&preds)? / m as f64;
    MeanEstimateReport::with_interval(Method::FtOnly, mean, var, delta, 0, m)
}
