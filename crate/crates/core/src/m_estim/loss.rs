use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A convex loss `l(x, y; theta)` with its score and Hessian in `theta`.
///
/// Hessians are written row-major into a `dim * dim` buffer.
pub trait LossModel: Send + Sync {
    fn name(&self) -> &'static str;

    /// Parameter dimension.
    fn dim(&self) -> usize;

    /// Required feature length, or `None` when features are ignored.
    fn feature_dim(&self) -> Option<usize>;

    fn loss(&self, x: &[f64], y: f64, theta: &[f64]) -> f64;

    fn score_into(&self, x: &[f64], y: f64, theta: &[f64], out: &mut [f64]);

    fn hessian_into(&self, x: &[f64], y: f64, theta: &[f64], out: &mut [f64]);

    /// Checks that `y` is an admissible outcome or prediction.
    fn check_outcome(&self, _y: f64) -> Result<()> {
        Ok(())
    }

    fn score(&self, x: &[f64], y: f64, theta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.score_into(x, y, theta, &mut out);
        out
    }

    fn hessian(&self, x: &[f64], y: f64, theta: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d * d];
        self.hessian_into(x, y, theta, &mut out);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mean,
    /// Category probabilities for labels `1..=d`.
    Categorical(usize),
    /// Least squares with `d` regressors (include a constant column for an intercept).
    LinearRegression(usize),
    /// Multinomial logit over `options` alternatives, each described by
    /// `features` attributes, plus an outside option with utility zero.
    Mnl {
        options: usize,
        features: usize,
    },
}

pub fn builtin_loss(kind: LossKind) -> Result<Box<dyn LossModel>> {
    let positive = |v: usize, what: &str| {
        if v == 0 {
            Err(Error::InvalidParameter(format!("{what} must be at least 1")))
        } else {
            Ok(())
        }
    };
    Ok(match kind {
        LossKind::Mean => Box::new(MeanLoss),
        LossKind::Categorical(d) => {
            positive(d, "category count")?;
            Box::new(CategoricalLoss { d })
        }
        LossKind::LinearRegression(d) => {
            positive(d, "regressor count")?;
            Box::new(OlsLoss { d })
        }
        LossKind::Mnl { options, features } => {
            positive(options, "option count")?;
            positive(features, "feature count")?;
            Box::new(MnlLoss {
                k: options,
                d: features,
            })
        }
    })
}

/// `l = (y - theta)^2 / 2`.
#[derive(Debug, Clone, Copy)]
pub struct MeanLoss;

impl LossModel for MeanLoss {
    fn name(&self) -> &'static str {
        "mean"
    }
    fn dim(&self) -> usize {
        1
    }
    fn feature_dim(&self) -> Option<usize> {
        None
    }
    fn loss(&self, _x: &[f64], y: f64, theta: &[f64]) -> f64 {
        0.5 * (y - theta[0]).powi(2)
    }
    fn score_into(&self, _x: &[f64], y: f64, theta: &[f64], out: &mut [f64]) {
        out[0] = theta[0] - y;
    }
    fn hessian_into(&self, _x: &[f64], _y: f64, _theta: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
    }
}

fn label_index(y: f64, lo: usize, hi: usize) -> Option<usize> {
    (y.fract() == 0.0 && y >= lo as f64 && y <= hi as f64).then_some(y as usize)
}

/// `l = sum_l (1{y = l} - theta_l)^2 / 2` with labels in `1..=d`.
#[derive(Debug, Clone, Copy)]
pub struct CategoricalLoss {
    d: usize,
}

impl LossModel for CategoricalLoss {
    fn name(&self) -> &'static str {
        "categorical"
    }
    fn dim(&self) -> usize {
        self.d
    }
    fn feature_dim(&self) -> Option<usize> {
        None
    }
    fn check_outcome(&self, y: f64) -> Result<()> {
        label_index(y, 1, self.d)
            .map(|_| ())
            .ok_or_else(|| Error::InvalidParameter(format!("categorical label {y} outside 1..={}", self.d)))
    }
    fn loss(&self, _x: &[f64], y: f64, theta: &[f64]) -> f64 {
        let hit = label_index(y, 1, self.d);
        theta
            .iter()
            .enumerate()
            .map(|(l, t)| {
                let e = if hit == Some(l + 1) { 1.0 } else { 0.0 };
                0.5 * (e - t).powi(2)
            })
            .sum()
    }
    fn score_into(&self, _x: &[f64], y: f64, theta: &[f64], out: &mut [f64]) {
        let hit = label_index(y, 1, self.d);
        for (l, (o, t)) in out.iter_mut().zip(theta).enumerate() {
            *o = if hit == Some(l + 1) { t - 1.0 } else { *t };
        }
    }
    fn hessian_into(&self, _x: &[f64], _y: f64, _theta: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for l in 0..self.d {
            out[l * self.d + l] = 1.0;
        }
    }
}

/// `l = (y - x'theta)^2 / 2`.
#[derive(Debug, Clone, Copy)]
pub struct OlsLoss {
    d: usize,
}

impl LossModel for OlsLoss {
    fn name(&self) -> &'static str {
        "ols"
    }
    fn dim(&self) -> usize {
        self.d
    }
    fn feature_dim(&self) -> Option<usize> {
        Some(self.d)
    }
    fn loss(&self, x: &[f64], y: f64, theta: &[f64]) -> f64 {
        0.5 * (y - dot(x, theta)).powi(2)
    }
    fn score_into(&self, x: &[f64], y: f64, theta: &[f64], out: &mut [f64]) {
        let r = dot(x, theta) - y;
        for (o, xi) in out.iter_mut().zip(x) {
            *o = xi * r;
        }
    }
    fn hessian_into(&self, x: &[f64], _y: f64, _theta: &[f64], out: &mut [f64]) {
        for i in 0..self.d {
            for j in 0..self.d {
                out[i * self.d + j] = x[i] * x[j];
            }
        }
    }
}

/// `l = log(1 + sum_k exp(x_k'theta)) - sum_k x_k'theta 1{y = k}` with
/// `y = 0` the outside option.
#[derive(Debug, Clone, Copy)]
pub struct MnlLoss {
    k: usize,
    d: usize,
}

impl MnlLoss {
    /// Utilities `u_k` and choice probabilities `p_k` for the inside options.
    fn probabilities(&self, x: &[f64], theta: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let u: Vec<f64> = x.chunks_exact(self.d).map(|xk| dot(xk, theta)).collect();
        let shift = u.iter().copied().fold(0.0, f64::max);
        let outside = (-shift).exp();
        let expu: Vec<f64> = u.iter().map(|v| (v - shift).exp()).collect();
        let denom = outside + expu.iter().sum::<f64>();
        let p = expu.iter().map(|e| e / denom).collect();
        (u, p, shift + denom.ln())
    }
}

impl LossModel for MnlLoss {
    fn name(&self) -> &'static str {
        "mnl"
    }
    fn dim(&self) -> usize {
        self.d
    }
    fn feature_dim(&self) -> Option<usize> {
        Some(self.k * self.d)
    }
    fn check_outcome(&self, y: f64) -> Result<()> {
        label_index(y, 0, self.k)
            .map(|_| ())
            .ok_or_else(|| Error::InvalidParameter(format!("choice {y} outside 0..={}", self.k)))
    }
    fn loss(&self, x: &[f64], y: f64, theta: &[f64]) -> f64 {
        let (u, _, lse) = self.probabilities(x, theta);
        match label_index(y, 1, self.k) {
            Some(c) => lse - u[c - 1],
            None => lse,
        }
    }
    fn score_into(&self, x: &[f64], y: f64, theta: &[f64], out: &mut [f64]) {
        let (_, p, _) = self.probabilities(x, theta);
        out.fill(0.0);
        for (xk, pk) in x.chunks_exact(self.d).zip(&p) {
            for (o, v) in out.iter_mut().zip(xk) {
                *o += pk * v;
            }
        }
        if let Some(c) = label_index(y, 1, self.k) {
            let xc = &x[(c - 1) * self.d..c * self.d];
            for (o, v) in out.iter_mut().zip(xc) {
                *o -= v;
            }
        }
    }
    fn hessian_into(&self, x: &[f64], _y: f64, theta: &[f64], out: &mut [f64]) {
        let (_, p, _) = self.probabilities(x, theta);
        let d = self.d;
        let mut xbar = vec![0.0; d];
        out.fill(0.0);
        for (xk, pk) in x.chunks_exact(d).zip(&p) {
            for i in 0..d {
                xbar[i] += pk * xk[i];
                for j in 0..d {
                    out[i * d + j] += pk * xk[i] * xk[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] -= xbar[i] * xbar[j];
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Largest discrepancy between analytic and central-difference derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeCheck {
    /// `max_i |score_i - fd_i| / max(|score|_inf, 1)`.
    pub score_error: f64,
    /// Same for the Hessian against differences of the score.
    pub hessian_error: f64,
}

impl DerivativeCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.score_error <= tol && self.hessian_error <= tol
    }
}

/// Compares score and Hessian with central finite differences at one point.
pub fn check_derivatives(model: &dyn LossModel, x: &[f64], y: f64, theta: &[f64]) -> DerivativeCheck {
    let d = model.dim();
    let score = model.score(x, y, theta);
    let hess = model.hessian(x, y, theta);
    let mut fd_score = vec![0.0; d];
    let mut fd_hess = vec![0.0; d * d];
    let mut tp = theta.to_vec();
    for j in 0..d {
        let h = 1e-5 * theta[j].abs().max(1.0);
        tp[j] = theta[j] + h;
        let lp = model.loss(x, y, &tp);
        let sp = model.score(x, y, &tp);
        tp[j] = theta[j] - h;
        let lm = model.loss(x, y, &tp);
        let sm = model.score(x, y, &tp);
        tp[j] = theta[j];
        fd_score[j] = (lp - lm) / (2.0 * h);
        for i in 0..d {
            fd_hess[i * d + j] = (sp[i] - sm[i]) / (2.0 * h);
        }
    }
    let rel = |a: &[f64], b: &[f64]| {
        let scale = a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max) / scale
    };
    DerivativeCheck {
        score_error: rel(&score, &fd_score),
        hessian_error: rel(&hess, &fd_hess),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RngSeed;
    use rand::Rng;

    #[test]
    fn displayed_scores() {
        let mean = builtin_loss(LossKind::Mean).unwrap();
        assert_eq!(mean.score(&[], 3.0, &[5.0]), vec![2.0]);

        let cat = builtin_loss(LossKind::Categorical(3)).unwrap();
        let s = cat.score(&[], 2.0, &[0.2, 0.5, 0.3]);
        assert_eq!(s, vec![0.2, -0.5, 0.3]);

        let mnl = builtin_loss(LossKind::Mnl {
            options: 1,
            features: 1,
        })
        .unwrap();
        assert_eq!(mnl.score(&[0.0], 0.0, &[0.0]), vec![0.0]);
        let (_, p, _) = MnlLoss { k: 1, d: 1 }.probabilities(&[0.0], &[0.0]);
        assert_eq!(p, vec![0.5]);
    }

    #[test]
    fn invalid_dimensions() {
        assert!(builtin_loss(LossKind::Categorical(0)).is_err());
        assert!(builtin_loss(LossKind::LinearRegression(0)).is_err());
        assert!(builtin_loss(LossKind::Mnl {
            options: 0,
            features: 2
        })
        .is_err());
    }

    #[test]
    fn outcome_domains() {
        let cat = builtin_loss(LossKind::Categorical(3)).unwrap();
        assert!(cat.check_outcome(3.0).is_ok());
        assert!(cat.check_outcome(0.0).is_err());
        assert!(cat.check_outcome(1.5).is_err());
        let mnl = builtin_loss(LossKind::Mnl {
            options: 2,
            features: 1,
        })
        .unwrap();
        assert!(mnl.check_outcome(0.0).is_ok());
        assert!(mnl.check_outcome(3.0).is_err());
    }

    #[test]
    fn mnl_extreme_utilities_stay_finite() {
        let mnl = MnlLoss { k: 2, d: 1 };
        let x = [800.0, -800.0];
        assert!(mnl.loss(&x, 1.0, &[1.0]).is_finite());
        assert!(mnl.score(&x, 0.0, &[1.0]).iter().all(|v| v.is_finite()));
    }

    fn random_case(kind: LossKind, rng: &mut impl Rng) -> (Vec<f64>, f64, Vec<f64>) {
        match kind {
            LossKind::Mean => (
                vec![],
                rng.random_range(-10.0..10.0),
                vec![rng.random_range(-10.0..10.0)],
            ),
            LossKind::Categorical(d) => (
                vec![],
                rng.random_range(1..=d) as f64,
                (0..d).map(|_| rng.random_range(-1.0..2.0)).collect(),
            ),
            LossKind::LinearRegression(d) => (
                (0..d).map(|_| rng.random_range(-3.0..3.0)).collect(),
                rng.random_range(-5.0..5.0),
                (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
            ),
            LossKind::Mnl { options, features } => (
                (0..options * features).map(|_| rng.random_range(-2.0..2.0)).collect(),
                rng.random_range(0..=options) as f64,
                (0..features).map(|_| rng.random_range(-1.5..1.5)).collect(),
            ),
        }
    }

    #[test]
    fn finite_difference_agreement() {
        let kinds = [
            LossKind::Mean,
            LossKind::Categorical(4),
            LossKind::LinearRegression(3),
            LossKind::Mnl {
                options: 3,
                features: 2,
            },
        ];
        let mut rng = RngSeed(8).rng();
        for kind in kinds {
            let model = builtin_loss(kind).unwrap();
            for _ in 0..100 {
                let (x, y, theta) = random_case(kind, &mut rng);
                let c = check_derivatives(model.as_ref(), &x, y, &theta);
                assert!(c.passes(1e-5), "{kind:?}: {c:?}");
            }
        }
    }
}
