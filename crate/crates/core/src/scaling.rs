//! The residual-variance scaling law `v(s) = a * s^(-alpha) + b` and its fit.

use std::io::Read;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest admissible `a`; the fit clamps to this bound.
pub const A_MIN: f64 = 1e-12;
pub const ALPHA_MIN: f64 = 0.01;
pub const ALPHA_MAX: f64 = 2.0;
const ALPHA_GRID: usize = 200;
const REL_IMPROVEMENT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingLaw {
    pub a: f64,
    pub alpha: f64,
    pub b: f64,
}

impl ScalingLaw {
    pub fn new(a: f64, alpha: f64, b: f64) -> Result<Self> {
        let law = Self { a, alpha, b };
        law.validate()?;
        Ok(law)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a.is_finite() && self.a > 0.0) {
            return Err(Error::InvalidParameter(format!("a must be positive, got {}", self.a)));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.b.is_finite() && self.b >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "b must be nonnegative, got {}",
                self.b
            )));
        }
        Ok(())
    }

    /// Residual variance at a real-valued sample size. No domain check.
    #[inline]
    pub fn variance_at(&self, s: f64) -> f64 {
        self.a * s.powf(-self.alpha) + self.b
    }

    /// Residual variance after fine-tuning on `s >= 1` samples.
    pub fn eval_variance(&self, s: u64) -> Result<f64> {
        if s < 1 {
            return Err(Error::Domain("sample size must be at least 1".into()));
        }
        Ok(self.variance_at(s as f64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingObservation {
    pub s: u64,
    pub variance: f64,
}

impl ScalingObservation {
    pub fn new(s: u64, variance: f64) -> Result<Self> {
        if s < 1 {
            return Err(Error::Domain("observation sample size must be at least 1".into()));
        }
        if !(variance.is_finite() && variance >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "observed variance must be finite and nonnegative, got {variance}"
            )));
        }
        Ok(Self { s, variance })
    }
}

/// Noiseless observations of `law` at the given sizes.
pub fn observations_from_law(law: &ScalingLaw, sizes: &[u64]) -> Vec<ScalingObservation> {
    sizes
        .iter()
        .map(|&s| ScalingObservation {
            s,
            variance: law.variance_at(s as f64),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingFit {
    pub law: ScalingLaw,
    pub r_squared: f64,
    /// Observed minus fitted variance, in input order.
    pub residuals: Vec<f64>,
    pub sse: f64,
    /// Set when all observed variances coincide; the law is then flat at `b`.
    pub degenerate: bool,
}

impl ScalingFit {
    pub fn alpha_ge_one(&self) -> bool {
        self.law.alpha >= 1.0
    }

    pub fn report(&self) -> FitReport {
        FitReport {
            a: self.law.a,
            alpha: self.law.alpha,
            b: self.law.b,
            r_squared: self.r_squared,
            alpha_ge_one_flag: self.alpha_ge_one(),
        }
    }
}

/// Serialized form of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub a: f64,
    pub alpha: f64,
    pub b: f64,
    pub r_squared: f64,
    pub alpha_ge_one_flag: bool,
}

/// `count` log-spaced sizes from `lo` to `hi`, rounded and deduplicated.
pub fn log_grid(lo: u64, hi: u64, count: usize) -> Vec<u64> {
    let (l, h) = ((lo.max(1)) as f64, hi.max(lo).max(1) as f64);
    let mut out: Vec<u64> = (0..count)
        .map(|k| {
            let t = if count > 1 { k as f64 / (count - 1) as f64 } else { 0.0 };
            (l * (h / l).powf(t)).round() as u64
        })
        .collect();
    out.dedup();
    out
}

/// Sum of squared errors of `law` against `obs`.
pub fn sse(law: &ScalingLaw, obs: &[ScalingObservation]) -> f64 {
    obs.iter()
        .map(|o| {
            let r = o.variance - law.variance_at(o.s as f64);
            r * r
        })
        .sum()
}

/// Best `(a, b)` for a fixed `alpha` under `a >= A_MIN`, `b >= 0`.
fn profile(alpha: f64, s: &[f64], v: &[f64]) -> (f64, f64, f64) {
    let k = s.len() as f64;
    let x: Vec<f64> = s.iter().map(|&si| si.powf(-alpha)).collect();
    let sx: f64 = x.iter().sum();
    let sv: f64 = v.iter().sum();
    let sxx: f64 = x.iter().map(|xi| xi * xi).sum();
    let sxv: f64 = x.iter().zip(v).map(|(xi, vi)| xi * vi).sum();
    let eval = |a: f64, b: f64| -> f64 {
        x.iter()
            .zip(v)
            .map(|(xi, vi)| {
                let r = vi - a * xi - b;
                r * r
            })
            .sum()
    };

    let mut candidates = Vec::with_capacity(3);
    let det = k * sxx - sx * sx;
    if det > 0.0 {
        let a = (k * sxv - sx * sv) / det;
        let b = (sv - a * sx) / k;
        if a >= A_MIN && b >= 0.0 {
            candidates.push((a, b));
        }
    }
    // b on its bound
    candidates.push(((sxv / sxx).max(A_MIN), 0.0));
    // a on its bound
    candidates.push((A_MIN, ((sv - A_MIN * sx) / k).max(0.0)));

    candidates
        .into_iter()
        .map(|(a, b)| (a, b, eval(a, b)))
        .min_by(|p, q| p.2.total_cmp(&q.2))
        .expect("candidate list is nonempty")
}

fn alpha_grid() -> Vec<f64> {
    let (lo, hi) = (ALPHA_MIN.ln(), ALPHA_MAX.ln());
    (0..ALPHA_GRID)
        .map(|i| (lo + (hi - lo) * i as f64 / (ALPHA_GRID - 1) as f64).exp())
        .collect()
}

fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..200 {
        if hi - lo <= 1e-13 * hi.abs().max(1.0) {
            break;
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        x1
    } else {
        x2
    }
}

fn project(p: Vector3<f64>) -> Vector3<f64> {
    Vector3::new(p[0].max(A_MIN), p[1].clamp(ALPHA_MIN, ALPHA_MAX), p[2].max(0.0))
}

fn law_of(p: &Vector3<f64>) -> ScalingLaw {
    ScalingLaw {
        a: p[0],
        alpha: p[1],
        b: p[2],
    }
}

/// Levenberg-Marquardt polish of all three parameters with bound projection.
fn polish(start: ScalingLaw, obs: &[ScalingObservation]) -> ScalingLaw {
    let mut p = Vector3::new(start.a, start.alpha, start.b);
    let mut cur = sse(&start, obs);
    let mut lambda = 1e-3;
    for _ in 0..500 {
        if cur == 0.0 {
            break;
        }
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for o in obs {
            let s = o.s as f64;
            let pow = s.powf(-p[1]);
            let r = p[0] * pow + p[2] - o.variance;
            let j = Vector3::new(pow, -p[0] * s.ln() * pow, 1.0);
            jtj += j * j.transpose();
            jtr += j * r;
        }
        let mut accepted = false;
        while lambda < 1e12 {
            let mut damped = jtj;
            for i in 0..3 {
                damped[(i, i)] += lambda * jtj[(i, i)].max(1e-300);
            }
            let Some(step) = damped.lu().solve(&(-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let trial = project(p + step);
            let val = sse(&law_of(&trial), obs);
            if val < cur {
                let improvement = (cur - val) / cur;
                p = trial;
                cur = val;
                lambda = (lambda / 10.0).max(1e-15);
                accepted = true;
                if improvement < REL_IMPROVEMENT_TOL {
                    return law_of(&p);
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    law_of(&p)
}

/// Least-squares fit of the scaling law in variance space.
///
/// A profile search over `alpha` on a log grid in `[0.01, 2]` (with `(a, b)`
/// solved by bound-constrained linear least squares) seeds a golden-section
/// refinement and a final Levenberg-Marquardt polish.
pub fn fit_scaling_law(obs: &[ScalingObservation]) -> Result<ScalingFit> {
    for (row, o) in obs.iter().enumerate() {
        if o.s < 1 {
            return Err(Error::Domain(format!("observation {row} has s < 1")));
        }
        if !o.variance.is_finite() {
            return Err(Error::NonFinite { row });
        }
        if o.variance < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "observation {row} has negative variance"
            )));
        }
    }
    let mut sizes: Vec<u64> = obs.iter().map(|o| o.s).collect();
    sizes.sort_unstable();
    sizes.dedup();
    if sizes.len() < 3 {
        return Err(Error::UnderdeterminedFit { distinct: sizes.len() });
    }

    let v: Vec<f64> = obs.iter().map(|o| o.variance).collect();
    if v.iter().all(|&x| x == v[0]) {
        let law = ScalingLaw {
            a: A_MIN,
            alpha: ALPHA_MIN,
            b: v[0],
        };
        let residuals = obs.iter().map(|o| o.variance - law.variance_at(o.s as f64)).collect();
        return Ok(ScalingFit {
            law,
            r_squared: 1.0,
            residuals,
            sse: sse(&law, obs),
            degenerate: true,
        });
    }

    let s: Vec<f64> = obs.iter().map(|o| o.s as f64).collect();
    let grid = alpha_grid();
    let profiled: Vec<(f64, f64, f64)> = grid.par_iter().map(|&al| profile(al, &s, &v)).collect();
    let best = profiled
        .iter()
        .enumerate()
        .min_by(|(i, p), (j, q)| p.2.total_cmp(&q.2).then(i.cmp(j)))
        .map(|(i, _)| i)
        .expect("grid is nonempty");

    let lo = grid[best.saturating_sub(1)];
    let hi = grid[(best + 1).min(grid.len() - 1)];
    let alpha = golden_section(|al| profile(al, &s, &v).2, lo, hi);
    let (a, b, refined) = profile(alpha, &s, &v);
    let (ga, gb, gsse) = profiled[best];
    let seed = if refined <= gsse {
        ScalingLaw { a, alpha, b }
    } else {
        ScalingLaw {
            a: ga,
            alpha: grid[best],
            b: gb,
        }
    };
    let polished = polish(seed, obs);
    let law = if sse(&polished, obs) <= sse(&seed, obs) {
        polished
    } else {
        seed
    };

    let residuals: Vec<f64> = obs.iter().map(|o| o.variance - law.variance_at(o.s as f64)).collect();
    let total_sse: f64 = residuals.iter().map(|r| r * r).sum();
    let mean_v = v.iter().sum::<f64>() / v.len() as f64;
    let sst: f64 = v.iter().map(|x| (x - mean_v) * (x - mean_v)).sum();
    Ok(ScalingFit {
        law,
        r_squared: 1.0 - total_sse / sst,
        residuals,
        sse: total_sse,
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogLogDiagnostic {
    /// `(ln s, ln(variance - b))` pairs for the retained observations.
    pub points: Vec<(f64, f64)>,
    pub dropped: usize,
}

impl LogLogDiagnostic {
    /// Ordinary least-squares slope of the retained points.
    pub fn slope(&self) -> Option<f64> {
        if self.points.len() < 2 {
            return None;
        }
        let k = self.points.len() as f64;
        let mx = self.points.iter().map(|p| p.0).sum::<f64>() / k;
        let my = self.points.iter().map(|p| p.1).sum::<f64>() / k;
        let sxy: f64 = self.points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = self.points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        (sxx > 0.0).then(|| sxy / sxx)
    }
}

/// Points that lie on a line of slope `-alpha` when the law holds exactly.
pub fn log_log_diagnostic(fit: &ScalingFit, obs: &[ScalingObservation]) -> LogLogDiagnostic {
    let b = fit.law.b;
    let mut points = Vec::with_capacity(obs.len());
    let mut dropped = 0;
    for o in obs {
        if o.variance > b && o.s >= 1 {
            points.push(((o.s as f64).ln(), (o.variance - b).ln()));
        } else {
            dropped += 1;
        }
    }
    LogLogDiagnostic { points, dropped }
}

/// Reads `s,variance` rows.
pub fn read_observations_csv<R: Read>(reader: R) -> Result<Vec<ScalingObservation>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| csv_parse_error(e, 0))?.clone();
    let names: Vec<&str> = headers.iter().collect();
    if names != ["s", "variance"] {
        return Err(Error::Parse {
            row: 0,
            column: 0,
            message: format!("expected header `s,variance`, found `{}`", names.join(",")),
        });
    }
    let mut obs = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| csv_parse_error(e, row))?;
        let field = |col: usize| record.get(col).unwrap_or("");
        let s: u64 = field(0).parse().map_err(|_| Error::Parse {
            row,
            column: 1,
            message: format!("invalid sample size `{}`", field(0)),
        })?;
        let variance: f64 = field(1).parse().map_err(|_| Error::Parse {
            row,
            column: 2,
            message: format!("invalid variance `{}`", field(1)),
        })?;
        obs.push(ScalingObservation::new(s, variance).map_err(|e| Error::Parse {
            row,
            column: if s < 1 { 1 } else { 2 },
            message: e.to_string(),
        })?);
    }
    Ok(obs)
}

pub(crate) fn csv_parse_error(e: csv::Error, row: usize) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::Io(std::io::Error::other(e.to_string())),
        csv::ErrorKind::UnequalLengths { pos, .. } => Error::Parse {
            row: pos.as_ref().map_or(row, |p| p.record() as usize),
            column: 0,
            message: e.to_string(),
        },
        _ => Error::Parse {
            row,
            column: 0,
            message: e.to_string(),
        },
    }
}
