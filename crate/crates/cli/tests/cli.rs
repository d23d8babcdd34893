use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ftppi::rampup::{rampup_final_estimate, run_rampup, RampUpPlan};
use ftppi::simulate::{bootstrap_robustness, SyntheticWorld};
use ftppi::{solve_with_feasibility, FeasibilityInput, RngSeed, ScalingLaw};
use ftppi_cli::{json_line, AllocateOutput, DEFAULT_SEED};
use serde_json::Value;

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn ftppi(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_ftppi"))
        .args(args)
        .env_remove("FTPPI_SEED")
        .env_remove("FTPPI_THREADS")
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

fn p(name: &str) -> String {
    golden(name).to_string_lossy().into_owned()
}

/// Compares against `tests/golden/<name>`; `FTPPI_BLESS=1` rewrites it.
fn check_golden(name: &str, actual: &str) {
    let path = golden(name);
    if std::env::var_os("FTPPI_BLESS").is_some() {
        fs::write(&path, actual).unwrap();
    }
    let expected = fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden file {name}"));
    assert_eq!(actual, expected, "{name}");
}

fn mean_args(sub: &str) -> Vec<String> {
    vec![
        sub.to_string(),
        "--labeled".into(),
        p("labeled.csv"),
        "--unlabeled".into(),
        p("unlabeled.csv"),
        "--predictions-labeled".into(),
        p("pred_labeled.csv"),
        "--predictions-unlabeled".into(),
        p("pred_unlabeled.csv"),
    ]
}

fn run_owned(args: &[String]) -> (i32, String, String) {
    ftppi(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn golden_outputs() {
    let cases: Vec<(&str, Vec<String>)> = vec![
        (
            "allocate.json",
            [
                "allocate",
                "--a",
                "10.21",
                "--alpha",
                "0.21",
                "--b",
                "1.98",
                "--n",
                "1000",
                "--sigma-sq",
                "9",
            ]
            .map(String::from)
            .to_vec(),
        ),
        (
            "allocate_infeasible.json",
            [
                "allocate",
                "--a",
                "1",
                "--alpha",
                "0.5",
                "--b",
                "5",
                "--n",
                "100",
                "--sigma-sq",
                "4",
            ]
            .map(String::from)
            .to_vec(),
        ),
        (
            "allocate.csv",
            [
                "allocate", "--a", "10.21", "--alpha", "0.21", "--b", "1.98", "--n", "1000", "--format", "csv",
            ]
            .map(String::from)
            .to_vec(),
        ),
        (
            "allocate_closed_form.json",
            ["allocate", "--a", "1", "--alpha", "1", "--b", "0", "--n", "100"]
                .map(String::from)
                .to_vec(),
        ),
        (
            "estimate_m_mnl.json",
            [
                "estimate-m",
                "--loss",
                "mnl",
                "--options",
                "2",
                "--labeled",
                &p("mnl_labeled.csv"),
                "--unlabeled",
                &p("mnl_unlabeled.csv"),
                "--predictions-labeled",
                &p("mnl_pred_labeled.csv"),
                "--predictions-unlabeled",
                &p("mnl_pred_unlabeled.csv"),
            ]
            .map(String::from)
            .to_vec(),
        ),
        (
            "fit_scaling.json",
            vec!["fit-scaling".into(), "--observations".into(), p("observations.csv")],
        ),
        ("estimate_mean.json", mean_args("estimate-mean")),
        (
            "estimate_m_ols.json",
            [mean_args("estimate-m"), vec!["--loss".into(), "ols".into()]].concat(),
        ),
    ];
    for (name, args) in cases {
        let (code, out, err) = run_owned(&args);
        assert_eq!(code, 0, "{name}: {err}");
        check_golden(name, &out);
    }
}

#[test]
fn allocate_examples() {
    let fraction = |args: &[&str]| {
        let (code, out, _) = ftppi(args);
        assert_eq!(code, 0);
        serde_json::from_str::<Value>(&out).unwrap()["fraction"]
            .as_f64()
            .unwrap()
    };
    let f = fraction(&[
        "allocate", "--a", "10.21", "--alpha", "0.21", "--b", "1.98", "--n", "10000",
    ]);
    assert!((0.098..=0.108).contains(&f), "{f}");
    let f = fraction(&["allocate", "--a", "1", "--alpha", "1", "--b", "0", "--n", "100"]);
    assert!((f - 0.5).abs() < 1e-9, "{f}");
}

#[test]
fn allocate_matches_library() {
    let (code, out, _) = ftppi(&[
        "allocate",
        "--a",
        "10.21",
        "--alpha",
        "0.21",
        "--b",
        "1.98",
        "--n",
        "1000",
        "--sigma-sq",
        "9",
    ]);
    assert_eq!(code, 0);
    let law = ScalingLaw::new(10.21, 0.21, 1.98).unwrap();
    let lib = solve_with_feasibility(&FeasibilityInput::new(law, 1000, 9.0).unwrap()).unwrap();
    assert_eq!(out.trim(), json_line(&AllocateOutput::from(lib)));
}

#[test]
fn mean_loss_agrees_with_mean_estimator() {
    let (_, mean_out, _) = run_owned(&mean_args("estimate-mean"));
    let (_, m_out, _) = run_owned(&[mean_args("estimate-m"), vec!["--loss".into(), "mean".into()]].concat());
    let a: Value = serde_json::from_str(&mean_out).unwrap();
    let b: Value = serde_json::from_str(&m_out).unwrap();
    assert_eq!(a["estimate"], b["theta_hat"][0]);
    assert_eq!(a["ci_low"], b["ci_per_coord"][0][0]);
    assert_eq!(a["ci_high"], b["ci_per_coord"][0][1]);
}

fn write_rampup_data(dir: &Path) -> PathBuf {
    let world: SyntheticWorld = serde_json::from_str(&fs::read_to_string(golden("world.json")).unwrap()).unwrap();
    let (data, _) = world.generate(3000, 0, RngSeed(5)).unwrap();
    let mut w = csv::Writer::from_path(dir.join("rampup.csv")).unwrap();
    w.write_record(["y", "x1"]).unwrap();
    for (x, y) in data.iter() {
        w.write_record([y.to_string(), x[0].to_string()]).unwrap();
    }
    w.flush().unwrap();
    dir.join("rampup.csv")
}

#[test]
fn rampup_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let labeled = write_rampup_data(dir.path());
    let args = [
        "rampup",
        "--labeled",
        labeled.to_str().unwrap(),
        "--plan",
        &p("plan.json"),
        "--simulator",
        &p("world.json"),
        "--pool-size",
        "5000",
    ];
    let (code, out, err) = ftppi(&args);
    assert_eq!(code, 0, "{err}");

    let world: SyntheticWorld = serde_json::from_str(&fs::read_to_string(golden("world.json")).unwrap()).unwrap();
    let plan: RampUpPlan = serde_json::from_str(&fs::read_to_string(golden("plan.json")).unwrap()).unwrap();
    let data = ftppi::read_labeled_csv(fs::File::open(&labeled).unwrap()).unwrap();
    let seed = RngSeed(DEFAULT_SEED);
    let trainer = world.trainer(seed.derive(1));
    let trace = run_rampup(&data, &plan, &trainer, seed.derive(2)).unwrap();
    let (_, pool) = world.generate(0, 5000, seed.derive(3)).unwrap();
    let est = rampup_final_estimate(&trace, &data, &pool, &trainer, 0.05).unwrap();

    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), trace.stages.len() + 1);
    for (line, rec) in lines.iter().zip(&trace.stages) {
        assert_eq!(*line, json_line(rec));
    }
    let last: Value = serde_json::from_str(lines.last().unwrap()).unwrap();
    assert_eq!(
        last["estimate"],
        serde_json::from_str::<Value>(&json_line(&est)).unwrap()
    );
    assert!(last["final"]["s_final"].as_u64().unwrap() > 0);
}

#[test]
fn bootstrap_matches_library_and_is_deterministic() {
    let args = [
        "bootstrap",
        "--simulator",
        &p("world.json"),
        "--b-d",
        "2",
        "--b-eps",
        "2",
        "--n-fit",
        "800",
        "--resamples",
        "40",
        "--seed",
        "17",
    ];
    let (code, first, err) = ftppi(&args);
    assert_eq!(code, 0, "{err}");
    let (_, second, _) = ftppi(&args);
    assert_eq!(first, second);
    let world: SyntheticWorld = serde_json::from_str(&fs::read_to_string(golden("world.json")).unwrap()).unwrap();
    let lib = bootstrap_robustness(&world, 2, 2, 800, 40, RngSeed(17)).unwrap();
    assert_eq!(first.trim(), json_line(&lib));
}

#[test]
fn simulate_writes_files_and_honours_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let scenario = p("scenario.json");
    for dir in [&a, &b] {
        let (code, out, err) = ftppi(&[
            "simulate",
            "--scenario",
            &scenario,
            "--out",
            dir.path().to_str().unwrap(),
            "--seed",
            "3",
        ]);
        assert_eq!(code, 0, "{err}");
        assert_eq!(
            out.trim(),
            r#"{"files":["allocation_curve.csv","comparison.csv","external.csv"]}"#
        );
    }
    for f in ["allocation_curve.csv", "comparison.csv", "external.csv"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let c = tempfile::tempdir().unwrap();
    ftppi(&[
        "simulate",
        "--scenario",
        &scenario,
        "--out",
        c.path().to_str().unwrap(),
        "--seed",
        "4",
    ]);
    assert_ne!(
        fs::read(a.path().join("allocation_curve.csv")).unwrap(),
        fs::read(c.path().join("allocation_curve.csv")).unwrap()
    );
}

#[test]
fn seed_flag_and_env_agree() {
    let args = [
        "bootstrap",
        "--simulator",
        &p("world.json"),
        "--b-d",
        "2",
        "--b-eps",
        "1",
        "--n-fit",
        "600",
        "--resamples",
        "20",
    ];
    let flag = ftppi(&[&args[..], &["--seed", "99"]].concat()).1;
    let env = Command::new(env!("CARGO_BIN_EXE_ftppi"))
        .args(args)
        .env("FTPPI_SEED", "99")
        .output()
        .unwrap();
    assert_eq!(flag, String::from_utf8(env.stdout).unwrap());
}

#[test]
fn errors_are_json_on_stderr_with_exit_two() {
    let cases: Vec<(Vec<String>, &str)> = vec![
        (
            vec![
                "fit-scaling".into(),
                "--observations".into(),
                "/no/such/file.csv".into(),
            ],
            "io",
        ),
        (
            ["allocate", "--a", "-1", "--alpha", "0.5", "--b", "1", "--n", "100"]
                .map(String::from)
                .to_vec(),
            "invalid_parameter",
        ),
        (vec!["bogus".into()], "usage"),
        (
            vec!["fit-scaling".into(), "--observations".into(), p("labeled.csv")],
            "parse",
        ),
        (
            [mean_args("estimate-m"), vec!["--loss".into(), "mnl".into()]].concat(),
            "invalid_parameter",
        ),
    ];
    for (args, kind) in cases {
        let (code, out, err) = run_owned(&args);
        assert_eq!(code, 2, "{args:?}");
        assert!(out.is_empty());
        assert_eq!(err.lines().count(), 1, "{err}");
        let v: Value = serde_json::from_str(err.trim()).unwrap();
        assert_eq!(v["error"], kind, "{args:?}: {err}");
        assert!(v["message"].is_string());
    }
}
