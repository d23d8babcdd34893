//! Optimal split between fine-tuning and rectification samples.
//!
//! For a labeled budget `n` the rectified mean has variance proportional to
//! `(a * s^(-alpha) + b) / (n - s)` when `s` samples are spent on
//! fine-tuning. The minimizer is the unique root of
//! `alpha*a*n*s^(-alpha-1) - (alpha+1)*a*s^(-alpha) - b` on `(0, n)`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scaling::ScalingLaw;

const BRACKET_EPS: f64 = 1e-9;
const BRACKET_TOL: f64 = 1e-10;
const SENSITIVITY_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FeasibilityInput {
    pub law: ScalingLaw,
    pub n: u64,
    /// Outcome variance `Var(Y)`.
    pub sigma_sq: f64,
}

impl FeasibilityInput {
    pub fn new(law: ScalingLaw, n: u64, sigma_sq: f64) -> Result<Self> {
        law.validate()?;
        if n < 2 {
            return Err(Error::InvalidParameter(format!("n must be at least 2, got {n}")));
        }
        if !(sigma_sq.is_finite() && sigma_sq > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma_sq must be positive, got {sigma_sq}"
            )));
        }
        Ok(Self { law, n, sigma_sq })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AllocationResult {
    pub n: u64,
    pub s_star_real: f64,
    /// Best integer split among the neighbours of the real root.
    pub s_star_int: u64,
    pub fraction: f64,
    pub objective_value: f64,
    pub objective_at_int: f64,
    /// `(s, objective)` for every integer candidate that was evaluated.
    pub integer_candidates: Vec<(u64, f64)>,
    /// Only known when the outcome variance was supplied.
    pub feasible: Option<bool>,
    pub threshold: Option<f64>,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FeasibilityReport {
    pub feasible: bool,
    pub threshold: f64,
    /// Unconstrained maximizer of the variance discriminant.
    pub s0: f64,
    pub q_at_s0: f64,
    /// Whether the sign of `q(s0)` agrees with the closed-form verdict.
    pub discriminant_agrees: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityReport {
    pub s_star: f64,
    pub delta_a: f64,
    pub delta_b: f64,
    pub delta_n: f64,
    pub sign_a: i8,
    pub sign_b: i8,
    pub sign_n: i8,
    pub ds_dn_closed_form: f64,
    pub ds_dn_numeric: f64,
    pub dfraction_dn: f64,
    /// `(alpha/(alpha+1)) * (b/a) * n^(alpha-1)`, reported when `alpha < 1`.
    pub fraction_derivative_bound: Option<f64>,
}

#[inline]
fn foc(law: &ScalingLaw, n: f64, s: f64) -> f64 {
    let sa = s.powf(-law.alpha);
    law.alpha * law.a * n * sa / s - (law.alpha + 1.0) * law.a * sa - law.b
}

/// First-order condition of the allocation objective. Strictly decreasing
/// in `s`; positive near 0 and negative near `n`.
pub fn foc_residual(law: &ScalingLaw, n: u64, s: f64) -> Result<f64> {
    let nf = n as f64;
    if !(s > 0.0 && s < nf) {
        return Err(Error::Domain(format!("s = {s} outside (0, {n})")));
    }
    Ok(foc(law, nf, s))
}

/// Variance of the rectified mean up to the `1/m` term, per unit outcome scale.
#[inline]
pub fn objective(law: &ScalingLaw, n: f64, s: f64) -> f64 {
    law.variance_at(s) / (n - s)
}

/// Bisection on `[eps*n, n - eps*n]` until the bracket is narrower than
/// `tol * n`. A zero tolerance runs to floating-point resolution.
fn bisect(law: &ScalingLaw, n: f64, tol: f64) -> f64 {
    let mut lo = BRACKET_EPS * n;
    let mut hi = n - BRACKET_EPS * n;
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if hi - lo < tol * n || mid <= lo || mid >= hi {
            break;
        }
        if foc(law, n, mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Continuous minimizer of the allocation objective for a real budget.
pub fn optimal_split_real(law: &ScalingLaw, n: f64) -> f64 {
    bisect(law, n, BRACKET_TOL)
}

pub fn solve_optimal_allocation(law: &ScalingLaw, n: u64) -> Result<AllocationResult> {
    law.validate()?;
    if n < 2 {
        return Err(Error::InvalidParameter(format!("n must be at least 2, got {n}")));
    }
    let nf = n as f64;
    let s_real = bisect(law, nf, BRACKET_TOL);
    let mut diagnostics = Vec::new();

    let mut upper = n - 1;
    if n >= 3 {
        upper = n - 2;
    }
    let rounded = s_real.round() as u64;
    let mut candidates: Vec<u64> = [rounded.saturating_sub(1), rounded, rounded + 1]
        .iter()
        .map(|&c| c.clamp(1, upper))
        .collect();
    candidates.dedup();
    if rounded.clamp(1, n - 1) > upper {
        diagnostics.push(format!(
            "integer split clamped to {upper} to keep at least 2 rectification samples"
        ));
    }
    let integer_candidates: Vec<(u64, f64)> = candidates.iter().map(|&c| (c, objective(law, nf, c as f64))).collect();
    let &(s_int, obj_int) = integer_candidates
        .iter()
        .min_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)))
        .expect("at least one candidate");

    Ok(AllocationResult {
        n,
        s_star_real: s_real,
        s_star_int: s_int,
        fraction: s_real / nf,
        objective_value: objective(law, nf, s_real),
        objective_at_int: obj_int,
        integer_candidates,
        feasible: None,
        threshold: None,
        diagnostics,
    })
}

/// Optimal allocation together with the verdict against the sample mean.
pub fn solve_with_feasibility(inp: &FeasibilityInput) -> Result<AllocationResult> {
    let mut result = solve_optimal_allocation(&inp.law, inp.n)?;
    let report = check_feasibility(inp);
    result.feasible = Some(report.feasible);
    result.threshold = Some(report.threshold);
    if !report.feasible {
        result
            .diagnostics
            .push("no split beats the labeled sample mean at this budget".into());
    }
    Ok(result)
}

/// `q(s) = sigma^2 (n - s) - n (a s^(-alpha) + b)`; positive exactly when the
/// split `s` beats the sample mean as the unlabeled pool grows.
pub fn variance_discriminant(inp: &FeasibilityInput, s: f64) -> Result<f64> {
    let nf = inp.n as f64;
    if !(s > 0.0 && s < nf) {
        return Err(Error::Domain(format!("s = {s} outside (0, {})", inp.n)));
    }
    Ok(discriminant(inp, s))
}

fn discriminant(inp: &FeasibilityInput, s: f64) -> f64 {
    let nf = inp.n as f64;
    inp.sigma_sq * (nf - s) - nf * inp.law.variance_at(s)
}

/// Peak location of the discriminant: `(a*alpha*n/sigma^2)^(1/(alpha+1))`.
pub fn discriminant_peak(inp: &FeasibilityInput) -> f64 {
    let ScalingLaw { a, alpha, .. } = inp.law;
    (a * alpha * inp.n as f64 / inp.sigma_sq).powf(1.0 / (alpha + 1.0))
}

pub fn check_feasibility(inp: &FeasibilityInput) -> FeasibilityReport {
    let ScalingLaw { a, alpha, b } = inp.law;
    let nf = inp.n as f64;
    let threshold = 1.0 - (1.0 + 1.0 / alpha) * (a * alpha * nf.powf(-alpha) / inp.sigma_sq).powf(1.0 / (alpha + 1.0));
    let feasible = b / inp.sigma_sq < threshold;
    let s0 = discriminant_peak(inp);
    let q_at_s0 = discriminant(inp, s0);
    FeasibilityReport {
        feasible,
        threshold,
        s0,
        q_at_s0,
        discriminant_agrees: (q_at_s0 > 0.0) == feasible,
    }
}

fn sign(delta: f64, scale: f64) -> i8 {
    if delta.abs() <= 1e-9 * scale {
        0
    } else if delta > 0.0 {
        1
    } else {
        -1
    }
}

/// Finite-difference effects of `a`, `b` and `n` on the optimal split.
pub fn allocation_sensitivity(law: &ScalingLaw, n: u64) -> Result<SensitivityReport> {
    law.validate()?;
    if n < 2 {
        return Err(Error::InvalidParameter(format!("n must be at least 2, got {n}")));
    }
    let nf = n as f64;
    let base = bisect(law, nf, 0.0);

    let bumped_a = ScalingLaw {
        a: law.a * (1.0 + SENSITIVITY_STEP),
        ..*law
    };
    let db = if law.b > 0.0 {
        law.b * SENSITIVITY_STEP
    } else {
        law.a * SENSITIVITY_STEP
    };
    let bumped_b = ScalingLaw { b: law.b + db, ..*law };
    let dn = nf * SENSITIVITY_STEP;
    let delta_a = bisect(&bumped_a, nf, 0.0) - base;
    let delta_b = bisect(&bumped_b, nf, 0.0) - base;
    let delta_n = bisect(law, nf + dn, 0.0) - base;

    let ScalingLaw { a, alpha, b } = *law;
    let ds_dn = a * alpha / ((a + b * base.powf(alpha)) * (alpha + 1.0));
    Ok(SensitivityReport {
        s_star: base,
        delta_a,
        delta_b,
        delta_n,
        sign_a: sign(delta_a, nf),
        sign_b: sign(delta_b, nf),
        sign_n: sign(delta_n, nf),
        ds_dn_closed_form: ds_dn,
        ds_dn_numeric: delta_n / dn,
        dfraction_dn: (ds_dn * nf - base) / (nf * nf),
        fraction_derivative_bound: (alpha < 1.0).then(|| alpha / (alpha + 1.0) * (b / a) * nf.powf(alpha - 1.0)),
    })
}
