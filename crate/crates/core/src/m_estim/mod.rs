//! Rectified M-estimation: minimize
//! `mean_i [l(x_i, y_i) - l(x_i, f_i)] + mean_j l(x~_j, f~_j)` over `theta`
//! and quantify its uncertainty with a sandwich covariance.

mod loss;
mod sandwich;
mod solver;

use rayon::prelude::*;

pub use loss::{
    builtin_loss, check_derivatives, CategoricalLoss, DerivativeCheck, LossKind, LossModel, MeanLoss, MnlLoss, OlsLoss,
};
pub use sandwich::{m_estimate_ci, sandwich_covariance, scalarize, MEstimateReport, SandwichCovariance, ScalarMode};
pub use solver::{
    rectified_objective, rectified_score, solve_ppi_m_estimator, solve_with_options, MSolution, SolverOptions,
};

use crate::data::{LabeledDataset, Predictor, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::stats::pairwise_sum;

/// Labeled rectification rows `(x, y, f(x))` and unlabeled rows `(x~, f(x~))`.
#[derive(Debug, Clone, PartialEq)]
pub struct MEstimationData {
    feature_dim: usize,
    labeled_x: Vec<f64>,
    labeled_y: Vec<f64>,
    labeled_f: Vec<f64>,
    unlabeled_x: Vec<f64>,
    unlabeled_f: Vec<f64>,
}

impl MEstimationData {
    pub fn new(
        feature_dim: usize,
        labeled_x: Vec<f64>,
        labeled_y: Vec<f64>,
        labeled_f: Vec<f64>,
        unlabeled_x: Vec<f64>,
        unlabeled_f: Vec<f64>,
    ) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::InvalidParameter("feature dimension must be at least 1".into()));
        }
        let n = labeled_y.len();
        let m = unlabeled_f.len();
        if labeled_f.len() != n {
            return Err(Error::DimensionMismatch {
                row: n.min(labeled_f.len()),
                expected: n,
                found: labeled_f.len(),
            });
        }
        if labeled_x.len() != n * feature_dim {
            return Err(Error::DimensionMismatch {
                row: labeled_x.len() / feature_dim,
                expected: n * feature_dim,
                found: labeled_x.len(),
            });
        }
        if unlabeled_x.len() != m * feature_dim {
            return Err(Error::DimensionMismatch {
                row: unlabeled_x.len() / feature_dim,
                expected: m * feature_dim,
                found: unlabeled_x.len(),
            });
        }
        for v in [&labeled_y, &labeled_f, &unlabeled_f] {
            if let Some(row) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite { row });
            }
        }
        for v in [&labeled_x, &unlabeled_x] {
            if let Some(pos) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite { row: pos / feature_dim });
            }
        }
        Ok(Self {
            feature_dim,
            labeled_x,
            labeled_y,
            labeled_f,
            unlabeled_x,
            unlabeled_f,
        })
    }

    /// Evaluates `f` on both datasets.
    pub fn from_predictor(labeled_ppi: &LabeledDataset, unlabeled: &UnlabeledDataset, f: &Predictor) -> Result<Self> {
        if labeled_ppi.dim() != unlabeled.dim() {
            return Err(Error::DimensionMismatch {
                row: 0,
                expected: labeled_ppi.dim(),
                found: unlabeled.dim(),
            });
        }
        let d = labeled_ppi.dim();
        let labeled_f = labeled_ppi
            .features()
            .par_chunks_exact(d)
            .map(|x| f.predict(x))
            .collect();
        let unlabeled_x: Vec<f64> = unlabeled.iter().flatten().copied().collect();
        let unlabeled_f = unlabeled_x.par_chunks_exact(d).map(|x| f.predict(x)).collect();
        Self::new(
            d,
            labeled_ppi.features().to_vec(),
            labeled_ppi.outcomes().to_vec(),
            labeled_f,
            unlabeled_x,
            unlabeled_f,
        )
    }

    pub fn n_labeled(&self) -> usize {
        self.labeled_y.len()
    }

    pub fn m(&self) -> usize {
        self.unlabeled_f.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn labeled_x(&self, i: usize) -> &[f64] {
        &self.labeled_x[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn unlabeled_x(&self, j: usize) -> &[f64] {
        &self.unlabeled_x[j * self.feature_dim..(j + 1) * self.feature_dim]
    }

    pub fn labeled_y(&self) -> &[f64] {
        &self.labeled_y
    }

    pub fn labeled_f(&self) -> &[f64] {
        &self.labeled_f
    }

    pub fn unlabeled_f(&self) -> &[f64] {
        &self.unlabeled_f
    }

    /// Checks feature length and outcome domains against `loss`.
    pub fn check_against(&self, loss: &dyn LossModel) -> Result<()> {
        if self.n_labeled() == 0 || self.m() == 0 {
            return Err(Error::InsufficientData(
                "rectified M-estimation needs labeled and unlabeled rows".into(),
            ));
        }
        if let Some(fd) = loss.feature_dim() {
            if fd != self.feature_dim {
                return Err(Error::DimensionMismatch {
                    row: 0,
                    expected: fd,
                    found: self.feature_dim,
                });
            }
        }
        for (row, &v) in self.labeled_y.iter().chain(&self.labeled_f).enumerate() {
            loss.check_outcome(v).map_err(|e| annotate(e, row % self.n_labeled()))?;
        }
        for (row, &v) in self.unlabeled_f.iter().enumerate() {
            loss.check_outcome(v).map_err(|e| annotate(e, row))?;
        }
        Ok(())
    }
}

fn annotate(e: Error, row: usize) -> Error {
    match e {
        Error::InvalidParameter(msg) => Error::InvalidParameter(format!("row {row}: {msg}")),
        other => other,
    }
}

const CHUNK: usize = 512;

/// Sums `width`-wide contributions of rows `0..count`.
///
/// Rows are accumulated sequentially inside fixed chunks and the chunk
/// totals combined pairwise, so the result does not depend on the number
/// of worker threads.
pub(crate) fn sum_rows<F>(count: usize, width: usize, row: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let chunks = count.div_ceil(CHUNK);
    let partials: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; width];
            let mut buf = vec![0.0; width];
            for i in c * CHUNK..((c + 1) * CHUNK).min(count) {
                row(i, &mut buf);
                for (a, b) in acc.iter_mut().zip(&buf) {
                    *a += b;
                }
            }
            acc
        })
        .collect();
    combine(&partials, width)
}

fn combine(parts: &[Vec<f64>], width: usize) -> Vec<f64> {
    match parts.len() {
        0 => vec![0.0; width],
        1 => parts[0].clone(),
        len => {
            let (l, r) = parts.split_at(len / 2);
            let mut a = combine(l, width);
            let b = combine(r, width);
            for (x, y) in a.iter_mut().zip(&b) {
                *x += y;
            }
            a
        }
    }
}

/// Scalar sum over rows with the same reproducibility guarantee.
pub(crate) fn sum_scalar<F>(count: usize, row: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let chunks = count.div_ceil(CHUNK);
    let partials: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| (c * CHUNK..((c + 1) * CHUNK).min(count)).map(&row).sum())
        .collect();
    pairwise_sum(&partials)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_sum_matches_direct() {
        let v = sum_rows(2000, 2, |i, out| {
            out[0] = i as f64;
            out[1] = 1.0;
        });
        assert_eq!(v, vec![1_999_000.0, 2000.0]);
        assert_eq!(sum_scalar(1001, |i| i as f64), 500_500.0);
        assert_eq!(sum_rows(0, 3, |_, _| {}), vec![0.0; 3]);
    }

    #[test]
    fn construction_checks() {
        assert!(MEstimationData::new(1, vec![0.0], vec![1.0], vec![1.0], vec![0.0], vec![1.0]).is_ok());
        assert!(matches!(
            MEstimationData::new(1, vec![0.0], vec![1.0], vec![], vec![0.0], vec![1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            MEstimationData::new(2, vec![0.0], vec![1.0], vec![1.0], vec![0.0, 0.0], vec![1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        let data = MEstimationData::new(1, vec![0.0], vec![4.0], vec![1.0], vec![0.0], vec![1.0]).unwrap();
        let cat = builtin_loss(LossKind::Categorical(3)).unwrap();
        assert!(data.check_against(cat.as_ref()).is_err());
        let ols = builtin_loss(LossKind::LinearRegression(2)).unwrap();
        assert!(matches!(
            data.check_against(ols.as_ref()),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
