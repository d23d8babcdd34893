use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::solver::condition_number;
use super::{sum_rows, LossModel, MEstimationData};
use crate::error::{Error, Result};
use crate::stats::z_two_sided;

const SINGULAR_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct SandwichCovariance {
    /// Mean Hessian over the labeled rectification rows.
    pub h_hat: DMatrix<f64>,
    /// Covariance of `psi(x, y) - psi(x, f)` over the labeled rows.
    pub v_resid: DMatrix<f64>,
    /// Covariance of `psi(x~, f~)` over the unlabeled pool.
    pub v_pred: DMatrix<f64>,
    pub sigma_hat: DMatrix<f64>,
    pub n_ppi: usize,
    pub m: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarMode {
    /// `det(V)^(1/d)`.
    Det,
    /// `tr(H^-1 H^-1 V)`.
    Trace,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MEstimateReport {
    pub theta_hat: Vec<f64>,
    pub sigma_hat: Vec<Vec<f64>>,
    pub ci_per_coord: Vec<(f64, f64)>,
    pub scalarized_nu_det: f64,
    pub scalarized_nu_trace: f64,
    pub delta: f64,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Sample covariance (divisor `rows - 1`) of row-major `values`.
fn covariance(values: &[f64], rows: usize, d: usize) -> DMatrix<f64> {
    let sum = sum_rows(rows, d, |i, out| out.copy_from_slice(&values[i * d..(i + 1) * d]));
    let mean: Vec<f64> = sum.iter().map(|s| s / rows as f64).collect();
    let outer = sum_rows(rows, d * d, |i, out| {
        let r = &values[i * d..(i + 1) * d];
        for a in 0..d {
            for b in 0..d {
                out[a * d + b] = (r[a] - mean[a]) * (r[b] - mean[b]);
            }
        }
    });
    let vals: Vec<f64> = outer.iter().map(|v| v / (rows - 1) as f64).collect();
    symmetrize(DMatrix::from_row_slice(d, d, &vals))
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn check_hessian(h: &DMatrix<f64>) -> Result<()> {
    let condition = condition_number(h);
    if condition.is_nan() || condition > SINGULAR_CONDITION {
        return Err(Error::SingularHessian { condition });
    }
    Ok(())
}

/// `H^-1 M H^-1` for symmetric `H`, via two LU solves.
fn sandwich(h: &DMatrix<f64>, middle: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let lu = h.clone().lu();
    let left = lu.solve(middle).ok_or(Error::SingularHessian {
        condition: f64::INFINITY,
    })?;
    let both = lu.solve(&left.transpose()).ok_or(Error::SingularHessian {
        condition: f64::INFINITY,
    })?;
    Ok(both.transpose())
}

/// Clamps slightly negative eigenvalues produced by rounding.
fn repair_psd(sigma: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let trace = sigma.trace();
    let eig = SymmetricEigen::new(sigma.clone());
    let floor = -1e-8 * trace.abs();
    if let Some(&worst) = eig.eigenvalues.iter().find(|&&l| l < floor) {
        return Err(Error::Numerical(format!(
            "covariance has eigenvalue {worst:e} below tolerance"
        )));
    }
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return Ok(sigma);
    }
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    Ok(symmetrize(rebuilt))
}

pub fn sandwich_covariance(
    loss: &dyn LossModel,
    data: &MEstimationData,
    theta_hat: &[f64],
) -> Result<SandwichCovariance> {
    let d = loss.dim();
    if theta_hat.len() != d {
        return Err(Error::DimensionMismatch {
            row: 0,
            expected: d,
            found: theta_hat.len(),
        });
    }
    let n = data.n_labeled();
    let m = data.m();
    if n < d + 1 || m < d + 1 {
        return Err(Error::InsufficientData(format!(
            "sandwich covariance needs more than {d} labeled and unlabeled rows, got {n} and {m}"
        )));
    }
    data.check_against(loss)?;

    let mut diffs = vec![0.0; n * d];
    diffs.par_chunks_exact_mut(d).enumerate().for_each(|(i, out)| {
        let x = data.labeled_x(i);
        let mut tmp = vec![0.0; d];
        loss.score_into(x, data.labeled_y()[i], theta_hat, out);
        loss.score_into(x, data.labeled_f()[i], theta_hat, &mut tmp);
        for (o, t) in out.iter_mut().zip(&tmp) {
            *o -= t;
        }
    });
    let mut preds = vec![0.0; m * d];
    preds.par_chunks_exact_mut(d).enumerate().for_each(|(j, out)| {
        loss.score_into(data.unlabeled_x(j), data.unlabeled_f()[j], theta_hat, out);
    });
    let v_resid = covariance(&diffs, n, d);
    let v_pred = covariance(&preds, m, d);

    let hsum = sum_rows(n, d * d, |i, out| {
        loss.hessian_into(data.labeled_x(i), data.labeled_y()[i], theta_hat, out)
    });
    let hvals: Vec<f64> = hsum.iter().map(|v| v / n as f64).collect();
    let h_hat = symmetrize(DMatrix::from_row_slice(d, d, &hvals));
    check_hessian(&h_hat)?;

    let middle = &v_resid / n as f64 + &v_pred / m as f64;
    let sigma_hat = repair_psd(symmetrize(sandwich(&h_hat, &middle)?))?;
    Ok(SandwichCovariance {
        h_hat,
        v_resid,
        v_pred,
        sigma_hat,
        n_ppi: n,
        m,
    })
}

/// Collapses a covariance matrix to the scalar used for allocation.
pub fn scalarize(v: &DMatrix<f64>, h: &DMatrix<f64>, mode: ScalarMode) -> Result<f64> {
    let d = v.nrows();
    if d == 0 || v.ncols() != d || h.nrows() != d || h.ncols() != d {
        return Err(Error::DimensionMismatch {
            row: 0,
            expected: d,
            found: h.nrows(),
        });
    }
    match mode {
        ScalarMode::Det => {
            let det = v.determinant();
            if det < -1e-10 {
                return Err(Error::Numerical(format!("negative determinant {det:e}")));
            }
            Ok(det.max(0.0).powf(1.0 / d as f64))
        }
        ScalarMode::Trace => {
            check_hessian(h)?;
            let lu = h.clone().lu();
            let once = lu.solve(v).ok_or(Error::SingularHessian {
                condition: f64::INFINITY,
            })?;
            let twice = lu.solve(&once).ok_or(Error::SingularHessian {
                condition: f64::INFINITY,
            })?;
            Ok(twice.trace())
        }
    }
}

/// Per-coordinate normal intervals and both scalarizations of the
/// residual score covariance.
pub fn m_estimate_ci(cov: &SandwichCovariance, theta_hat: &[f64], delta: f64) -> Result<MEstimateReport> {
    let z = z_two_sided(delta)?;
    let d = theta_hat.len();
    if cov.sigma_hat.nrows() != d {
        return Err(Error::DimensionMismatch {
            row: 0,
            expected: cov.sigma_hat.nrows(),
            found: d,
        });
    }
    let ci_per_coord = (0..d)
        .map(|l| {
            let half = z * cov.sigma_hat[(l, l)].max(0.0).sqrt();
            (theta_hat[l] - half, theta_hat[l] + half)
        })
        .collect();
    Ok(MEstimateReport {
        theta_hat: theta_hat.to_vec(),
        sigma_hat: rows_of(&cov.sigma_hat),
        ci_per_coord,
        scalarized_nu_det: scalarize(&cov.v_resid, &cov.h_hat, ScalarMode::Det)?,
        scalarized_nu_trace: scalarize(&cov.v_resid, &cov.h_hat, ScalarMode::Trace)?,
        delta,
    })
}
