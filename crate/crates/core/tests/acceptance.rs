//! End-to-end acceptance criteria. Each criterion prints one `[PASS]` or
//! `[FAIL]` line; the process exits nonzero if any criterion fails.

use std::time::{Duration, Instant};

use ftppi::m_estim::{builtin_loss, check_derivatives, sandwich_covariance, solve_ppi_m_estimator, LossKind};
use ftppi::rampup::{rampup_final_estimate, replay_stages, run_rampup, should_stop, Decision, RampUpPlan};
use ftppi::scaling::{fit_scaling_law, log_grid, observations_from_law, ScalingObservation};
use ftppi::simulate::{
    bootstrap_robustness, brute_force_allocation, ft_ppi_reports, run_estimator_comparison, BiasProfile, LinearWorld,
    SyntheticWorld,
};
use ftppi::{
    check_feasibility, solve_optimal_allocation, FeasibilityInput, MEstimationData, PpiMeanInputs, RngSeed, ScalingLaw,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

const REF_LAW: ScalingLaw = ScalingLaw {
    a: 10.21,
    alpha: 0.21,
    b: 1.98,
};
const STEEP_LAW: ScalingLaw = ScalingLaw {
    a: 11.403,
    alpha: 0.261,
    b: 2.447,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn timed(limit: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut out = f();
    let took = start.elapsed();
    if took > limit {
        out.pass = false;
    }
    out.detail = format!("{} [{:.3?} of {:?}]", out.detail, took, limit);
    out
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn reference_world() -> SyntheticWorld {
    SyntheticWorld::new(88.441, 9.0, 1, REF_LAW, BiasProfile::Zero, 10).unwrap()
}

fn ac1() -> Outcome {
    let start = Instant::now();
    let r = solve_optimal_allocation(&REF_LAW, 10_000).unwrap();
    let took = start.elapsed();
    Outcome {
        pass: (0.098..=0.108).contains(&r.fraction) && took < Duration::from_millis(1),
        detail: format!("fraction = {:.5}, solve time {:.1?} (< 1ms)", r.fraction, took),
    }
}

fn ac2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let a = 10f64.powf(rng.random_range(-2.0..3.0));
        let alpha = rng.random_range(0.02..2.0);
        let n = rng.random_range(10u64..2_000_000);
        let law = ScalingLaw::new(a, alpha, 0.0).unwrap();
        let r = solve_optimal_allocation(&law, n).unwrap();
        worst = worst.max((r.fraction - alpha / (alpha + 1.0)).abs());
    }
    Outcome {
        pass: worst < 1e-9,
        detail: format!("max |fraction - alpha/(alpha+1)| = {worst:.2e} over 100 draws"),
    }
}

fn ac3() -> Outcome {
    let law = |b| ScalingLaw::new(1.0, 1.0, b).unwrap();
    let small = check_feasibility(&FeasibilityInput::new(law(0.5), 4, 1.0).unwrap());
    let all_infeasible = [0.0, 0.1, 0.5, 0.9]
        .iter()
        .all(|&b| !check_feasibility(&FeasibilityInput::new(law(b), 4, 1.0).unwrap()).feasible);
    let big_hi = check_feasibility(&FeasibilityInput::new(law(0.9), 100, 1.0).unwrap());
    let big_lo = check_feasibility(&FeasibilityInput::new(law(0.5), 100, 1.0).unwrap());
    Outcome {
        pass: small.threshold == 0.0
            && all_infeasible
            && big_hi.threshold == 0.8
            && !big_hi.feasible
            && big_lo.feasible,
        detail: format!(
            "threshold(n=4) = {}, threshold(n=100) = {}, b=0.9 feasible={}, b=0.5 feasible={}",
            small.threshold, big_hi.threshold, big_hi.feasible, big_lo.feasible
        ),
    }
}

fn ac4() -> Outcome {
    let worlds = [
        ("reference", reference_world(), 10_000usize),
        (
            "b0_alpha1",
            SyntheticWorld::new(
                0.0,
                4.0,
                1,
                ScalingLaw {
                    a: 4.0,
                    alpha: 1.0,
                    b: 0.0,
                },
                BiasProfile::Zero,
                1,
            )
            .unwrap(),
            1_000,
        ),
        (
            "steep_law",
            SyntheticWorld::new(50.0, 9.0, 1, STEEP_LAW, BiasProfile::Zero, 10).unwrap(),
            5_000,
        ),
    ];
    let step = 0.05;
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, (name, world, n)) in worlds.iter().enumerate() {
        let solver = solve_optimal_allocation(&world.law, *n as u64).unwrap().fraction;
        let bf = brute_force_allocation(world, *n, 100_000, step, 200, RngSeed(4000 + k as u64)).unwrap();
        let nearest = (solver / step).round() * step;
        let ok = (bf.best_fraction - nearest).abs() <= step + 1e-9;
        pass &= ok;
        parts.push(format!("{name}: solver {solver:.4}, empirical {:.2}", bf.best_fraction));
    }
    Outcome {
        pass,
        detail: parts.join("; "),
    }
}

fn ac5() -> Outcome {
    let exact = fit_scaling_law(&observations_from_law(&REF_LAW, &log_grid(10, 5000, 100))).unwrap();
    let exact_err = rel(exact.law.a, REF_LAW.a)
        .max(rel(exact.law.alpha, REF_LAW.alpha))
        .max(rel(exact.law.b, REF_LAW.b));

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let noisy_obs: Vec<ScalingObservation> = log_grid(10, 5000, 100)
        .into_iter()
        .map(|s| ScalingObservation::new(s, REF_LAW.variance_at(s as f64) + noise.sample(&mut rng)).unwrap())
        .collect();
    let noisy = fit_scaling_law(&noisy_obs).unwrap();

    let world = SyntheticWorld::new(50.0, 9.0, 1, STEEP_LAW, BiasProfile::Zero, 10).unwrap();
    let boot = bootstrap_robustness(&world, 10, 5, 5000, 1200, RngSeed(55)).unwrap();
    let width = boot.fraction.width();
    Outcome {
        pass: exact_err < 1e-6 && noisy.r_squared >= 0.99 && width < 0.02,
        detail: format!(
            "noiseless rel err {exact_err:.1e}; noisy R^2 {:.4}; s*/n median {:.4} in [{:.4}, {:.4}] width {width:.4}",
            noisy.r_squared, boot.fraction.median, boot.fraction.ci_low, boot.fraction.ci_high
        ),
    }
}

fn ac6() -> Outcome {
    let world = reference_world().with_training_noise(false);
    let (s, n, reps) = (200usize, 700usize, 2000usize);
    let reports = ft_ppi_reports(&world, s, n, 100_000, 0.05, reps, RngSeed(66)).unwrap();
    let est: Vec<f64> = reports.iter().map(|r| r.estimate).collect();
    let mean = est.iter().sum::<f64>() / reps as f64;
    let sd = (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
    let se = sd / (reps as f64).sqrt();
    let z = (mean - world.true_mean) / se;
    let coverage = reports.iter().filter(|r| r.covers(world.true_mean)).count() as f64 / reps as f64;
    Outcome {
        pass: z.abs() <= 3.0 && (0.935..=0.965).contains(&coverage),
        detail: format!("bias z = {z:.2}, coverage = {:.2}%", 100.0 * coverage),
    }
}

fn ac7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let loss = builtin_loss(LossKind::Mean).unwrap();
    let (mut worst_theta, mut worst_var): (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let n = rng.random_range(5..300usize);
        let m = rng.random_range(5..3000usize);
        let shift: f64 = rng.random_range(-50.0..50.0);
        let y: Vec<f64> = (0..n)
            .map(|_| shift + 3.0 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let f: Vec<f64> = y
            .iter()
            .map(|v| v + 0.5 + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let uf: Vec<f64> = (0..m)
            .map(|_| shift + 3.0 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let data = MEstimationData::new(1, vec![0.0; n], y.clone(), f.clone(), vec![0.0; m], uf.clone()).unwrap();
        let sol = solve_ppi_m_estimator(loss.as_ref(), &data, &[0.0]).unwrap();
        let cov = sandwich_covariance(loss.as_ref(), &data, &sol.theta).unwrap();
        let ppi = PpiMeanInputs::from_predictions(y, f, uf).unwrap();
        let est = ppi.estimate().unwrap();
        let var = ppi.variance_hat().unwrap().total;
        worst_theta = worst_theta.max((sol.theta[0] - est).abs() / est.abs().max(1.0));
        worst_var = worst_var.max((cov.sigma_hat[(0, 0)] - var).abs() / var.max(1.0));
    }
    Outcome {
        pass: worst_theta <= 1e-9 && worst_var <= 1e-9,
        detail: format!("max estimate gap {worst_theta:.1e}, max variance gap {worst_var:.1e}"),
    }
}

fn ac8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let kinds = [
        LossKind::Mean,
        LossKind::Categorical(4),
        LossKind::LinearRegression(3),
        LossKind::Mnl {
            options: 3,
            features: 2,
        },
    ];
    let mut worst: f64 = 0.0;
    let mut pass = true;
    for kind in kinds {
        let model = builtin_loss(kind).unwrap();
        let fd = model.feature_dim().unwrap_or(1);
        for _ in 0..100 {
            let x: Vec<f64> = (0..fd).map(|_| rng.sample(StandardNormal)).collect();
            let theta: Vec<f64> = (0..model.dim()).map(|_| rng.sample(StandardNormal)).collect();
            let y = match kind {
                LossKind::Categorical(d) => rng.random_range(1..=d) as f64,
                LossKind::Mnl { options, .. } => rng.random_range(0..=options) as f64,
                _ => 2.0 * rng.sample::<f64, _>(StandardNormal),
            };
            let chk = check_derivatives(model.as_ref(), &x, y, &theta);
            worst = worst.max(chk.score_error).max(chk.hessian_error);
            pass &= chk.passes(1e-5);
        }
    }
    Outcome {
        pass,
        detail: format!("worst relative error {worst:.1e} over 4 losses x 100 points"),
    }
}

fn ac9() -> Outcome {
    let world = LinearWorld::new([1.0, 2.0], 1.0, 0.5, 0.5).unwrap();
    let loss = builtin_loss(LossKind::LinearRegression(2)).unwrap();
    let reps = 1000;
    let mut thetas = Vec::with_capacity(reps);
    let mut sigma_sum = [[0.0; 2]; 2];
    for r in 0..reps {
        let data = world.draw(500, 100_000, RngSeed(9000 + r as u64)).unwrap();
        let sol = solve_ppi_m_estimator(loss.as_ref(), &data, &[0.0, 0.0]).unwrap();
        let cov = sandwich_covariance(loss.as_ref(), &data, &sol.theta).unwrap();
        for (i, row) in sigma_sum.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += cov.sigma_hat[(i, j)];
            }
        }
        thetas.push([sol.theta[0], sol.theta[1]]);
    }
    let mean = [0, 1].map(|i| thetas.iter().map(|t| t[i]).sum::<f64>() / reps as f64);
    let mut worst: f64 = 0.0;
    let mut cells = Vec::new();
    for i in 0..2 {
        for j in 0..2 {
            let emp = thetas.iter().map(|t| (t[i] - mean[i]) * (t[j] - mean[j])).sum::<f64>() / (reps - 1) as f64;
            let sand = sigma_sum[i][j] / reps as f64;
            worst = worst.max(rel(emp, sand));
            cells.push(format!("{emp:.3e}/{sand:.3e}"));
        }
    }
    Outcome {
        pass: worst <= 0.15,
        detail: format!(
            "empirical/sandwich {}; worst rel gap {:.1}%",
            cells.join(" "),
            100.0 * worst
        ),
    }
}

fn ac10() -> Outcome {
    let mut rule_ok = true;
    let laws = [
        (
            ScalingLaw {
                a: 1.0,
                alpha: 1.0,
                b: 0.0,
            },
            100usize,
            vec![10usize, 20, 35, 55, 60],
        ),
        (REF_LAW, 10_000, vec![100, 250, 500, 1000, 2000]),
        (REF_LAW, 10_000, vec![10, 20, 40]),
        (STEEP_LAW, 5_000, vec![50, 100, 200, 400, 800, 1600]),
        (
            ScalingLaw {
                a: 3.0,
                alpha: 0.6,
                b: 0.2,
            },
            2_000,
            vec![20, 60, 180, 540, 1000],
        ),
    ];
    for (law, n, grid) in &laws {
        let pairs: Vec<(usize, f64)> = grid.iter().map(|&s| (s, law.variance_at(s as f64))).collect();
        let recs = replay_stages(*n, &pairs);
        let stops = recs.iter().filter(|r| r.decision == Decision::Stop).count();
        rule_ok &= stops == 1 && recs.last().map(|r| r.decision) == Some(Decision::Stop);
        for r in &recs {
            rule_ok &= should_stop(r.stage, grid.len(), r.s_hat, r.n_l) == (r.decision == Decision::Stop);
        }
    }
    let closed = replay_stages(
        100,
        &[
            (10, 0.1),
            (20, 0.05),
            (35, 1.0 / 35.0),
            (55, 1.0 / 55.0),
            (60, 1.0 / 60.0),
        ],
    );
    rule_ok &= closed.last().map(|r| r.n_l) == Some(55) && (closed[2].s_hat.unwrap() - 50.0).abs() < 1e-3;

    let world = reference_world();
    let plan = RampUpPlan::new(300, vec![100, 200, 400, 800, 1600]);
    let reps = 1000;
    let est: Vec<f64> = (0..reps)
        .map(|r| {
            let seed = RngSeed(10_000 + r as u64);
            let (data, pool) = world.generate(3000, 20_000, seed.derive(0)).unwrap();
            let trainer = world.trainer(seed.derive(1));
            let trace = run_rampup(&data, &plan, &trainer, seed.derive(2)).unwrap();
            rampup_final_estimate(&trace, &data, &pool, &trainer, 0.05)
                .unwrap()
                .estimate
        })
        .collect();
    let mean = est.iter().sum::<f64>() / reps as f64;
    let sd = (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
    let z = (mean - world.true_mean) / (sd / (reps as f64).sqrt());
    Outcome {
        pass: rule_ok && z.abs() <= 3.0,
        detail: format!(
            "stopping rule on {} deterministic traces: {rule_ok}; end-to-end bias z = {z:.2}",
            laws.len() + 1
        ),
    }
}

fn ac11() -> Outcome {
    let worlds = [
        (reference_world(), 2000usize),
        (
            SyntheticWorld::new(
                1.0,
                4.0,
                2,
                ScalingLaw {
                    a: 2.0,
                    alpha: 0.5,
                    b: 0.5,
                },
                BiasProfile::Constant(1.0),
                1,
            )
            .unwrap(),
            500,
        ),
        (
            SyntheticWorld::new(
                0.0,
                4.0,
                1,
                ScalingLaw {
                    a: 1.0,
                    alpha: 0.8,
                    b: 1.0,
                },
                BiasProfile::Drifting(0.5),
                1,
            )
            .unwrap(),
            800,
        ),
    ];
    let mut pass = true;
    let mut shown = Vec::new();
    for (k, (world, n)) in worlds.iter().enumerate() {
        let t = run_estimator_comparison(world, *n, 5000, 100, RngSeed(1100 + k as u64)).unwrap();
        pass &= t.sample_savings.to_bits() == t.variance_reduction.to_bits();
        shown.push(format!("{:.4}", t.variance_reduction));
    }
    Outcome {
        pass,
        detail: format!(
            "savings == reduction bitwise in 3 tables (reductions {})",
            shown.join(", ")
        ),
    }
}

type Criterion = (&'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 11] = [
        ("AC1 allocation optimum", Duration::from_secs(1), ac1),
        ("AC2 closed form when b = 0", Duration::from_secs(1), ac2),
        ("AC3 feasibility threshold", Duration::from_secs(1), ac3),
        ("AC4 brute-force oracle agreement", Duration::from_secs(300), ac4),
        ("AC5 scaling-law recovery", Duration::from_secs(120), ac5),
        ("AC6 unbiasedness and coverage", Duration::from_secs(180), ac6),
        ("AC7 mean-loss reduction", Duration::from_secs(10), ac7),
        ("AC8 gradient checks", Duration::from_secs(10), ac8),
        ("AC9 sandwich validation", Duration::from_secs(180), ac9),
        ("AC10 ramp-up soundness", Duration::from_secs(300), ac10),
        ("AC11 variance-reduction identity", Duration::from_secs(60), ac11),
    ];
    let mut failed = Vec::new();
    for (name, limit, run) in criteria {
        let out = timed(limit, run);
        let tag = if out.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {name}: {}", out.detail);
        if !out.pass {
            failed.push(name);
        }
    }
    println!("acceptance: {} passed, {} failed", 11 - failed.len(), failed.len());
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
