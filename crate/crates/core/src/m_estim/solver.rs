use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::{sum_rows, sum_scalar, LossModel, MEstimationData};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Stop once the max-norm of the rectified score falls below this.
    pub tol: f64,
    /// Above this condition number Newton steps give way to gradient steps.
    pub max_condition: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-10,
            max_condition: 1e12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MSolution {
    pub theta: Vec<f64>,
    pub iterations: usize,
    pub score_norm: f64,
    pub gradient_fallback: bool,
}

/// The rectified empirical risk at `theta`.
pub fn rectified_objective(loss: &dyn LossModel, data: &MEstimationData, theta: &[f64]) -> f64 {
    let n = data.n_labeled();
    let m = data.m();
    let lab = sum_scalar(n, |i| {
        let x = data.labeled_x(i);
        loss.loss(x, data.labeled_y[i], theta) - loss.loss(x, data.labeled_f[i], theta)
    });
    let unl = sum_scalar(m, |j| loss.loss(data.unlabeled_x(j), data.unlabeled_f[j], theta));
    lab / n as f64 + unl / m as f64
}

/// Gradient of [`rectified_objective`].
pub fn rectified_score(loss: &dyn LossModel, data: &MEstimationData, theta: &[f64]) -> Vec<f64> {
    let d = loss.dim();
    let n = data.n_labeled() as f64;
    let m = data.m() as f64;
    let lab = sum_rows(data.n_labeled(), d, |i, out| {
        let x = data.labeled_x(i);
        let mut tmp = vec![0.0; d];
        loss.score_into(x, data.labeled_y[i], theta, out);
        loss.score_into(x, data.labeled_f[i], theta, &mut tmp);
        for (o, t) in out.iter_mut().zip(&tmp) {
            *o -= t;
        }
    });
    let unl = sum_rows(data.m(), d, |j, out| {
        loss.score_into(data.unlabeled_x(j), data.unlabeled_f[j], theta, out)
    });
    lab.iter().zip(&unl).map(|(a, b)| a / n + b / m).collect()
}

fn rectified_hessian(loss: &dyn LossModel, data: &MEstimationData, theta: &[f64]) -> DMatrix<f64> {
    let d = loss.dim();
    let n = data.n_labeled() as f64;
    let m = data.m() as f64;
    let lab = sum_rows(data.n_labeled(), d * d, |i, out| {
        let x = data.labeled_x(i);
        let mut tmp = vec![0.0; d * d];
        loss.hessian_into(x, data.labeled_y[i], theta, out);
        loss.hessian_into(x, data.labeled_f[i], theta, &mut tmp);
        for (o, t) in out.iter_mut().zip(&tmp) {
            *o -= t;
        }
    });
    let unl = sum_rows(data.m(), d * d, |j, out| {
        loss.hessian_into(data.unlabeled_x(j), data.unlabeled_f[j], theta, out)
    });
    let vals: Vec<f64> = lab.iter().zip(&unl).map(|(a, b)| a / n + b / m).collect();
    DMatrix::from_row_slice(d, d, &vals)
}

pub(crate) fn condition_number(h: &DMatrix<f64>) -> f64 {
    let sv = h.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimizes the rectified risk with default options.
pub fn solve_ppi_m_estimator(loss: &dyn LossModel, data: &MEstimationData, init: &[f64]) -> Result<MSolution> {
    solve_with_options(loss, data, init, SolverOptions::default())
}

/// Damped Newton with step halving, falling back to gradient steps when
/// the rectified Hessian is numerically singular.
pub fn solve_with_options(
    loss: &dyn LossModel,
    data: &MEstimationData,
    init: &[f64],
    opts: SolverOptions,
) -> Result<MSolution> {
    let d = loss.dim();
    if init.len() != d {
        return Err(Error::DimensionMismatch {
            row: 0,
            expected: d,
            found: init.len(),
        });
    }
    data.check_against(loss)?;

    let mut theta = init.to_vec();
    let mut obj = rectified_objective(loss, data, &theta);
    let mut grad = rectified_score(loss, data, &theta);
    let mut gnorm = max_norm(&grad);
    let mut fallback = false;
    let mut gd_step = 1.0;

    for iter in 0..opts.max_iter {
        if gnorm < opts.tol {
            return Ok(MSolution {
                theta,
                iterations: iter,
                score_norm: gnorm,
                gradient_fallback: fallback,
            });
        }
        let h = rectified_hessian(loss, data, &theta);
        let g = DVector::from_column_slice(&grad);
        let newton = (condition_number(&h) <= opts.max_condition)
            .then(|| h.lu().solve(&(-&g)))
            .flatten();
        let is_newton = newton.is_some();
        let (dir, mut t) = match newton {
            Some(p) => (p, 1.0),
            None => {
                fallback = true;
                (-g, gd_step)
            }
        };

        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = theta.iter().zip(dir.iter()).map(|(a, p)| a + t * p).collect();
            let trial_obj = rectified_objective(loss, data, &trial);
            if trial_obj.is_finite() {
                let trial_grad = rectified_score(loss, data, &trial);
                let trial_norm = max_norm(&trial_grad);
                let flat = trial_obj <= obj + 4.0 * f64::EPSILON * obj.abs().max(1.0);
                if trial_obj < obj || (flat && trial_norm < gnorm) {
                    theta = trial;
                    obj = trial_obj;
                    grad = trial_grad;
                    gnorm = trial_norm;
                    accepted = true;
                    if !is_newton {
                        gd_step = 2.0 * t;
                    }
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if gnorm < opts.tol {
        return Ok(MSolution {
            theta,
            iterations: opts.max_iter,
            score_norm: gnorm,
            gradient_fallback: fallback,
        });
    }
    Err(Error::Convergence {
        iterations: opts.max_iter,
        score_norm: gnorm,
        last_iterate: theta,
    })
}
