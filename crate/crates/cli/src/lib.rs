//! Command-line adapter over the `ftppi` library.
//!
//! Every subcommand parses its inputs, calls one library entry point and
//! renders the result; no estimation logic lives here.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use ftppi::m_estim::{
    builtin_loss, m_estimate_ci, sandwich_covariance, solve_ppi_m_estimator, LossKind, MEstimationData,
};
use ftppi::rampup::{rampup_final_estimate, run_rampup, RampUpPlan};
use ftppi::scaling::read_observations_csv;
use ftppi::simulate::{bootstrap_robustness, run_scenario, Scenario, SyntheticWorld};
use ftppi::stats::round_sig;
use ftppi::{
    fit_scaling_law, read_labeled_csv, read_predictions_csv, read_unlabeled_csv, solve_optimal_allocation,
    solve_with_feasibility, Error, FeasibilityInput, Method, PpiMeanInputs, RngSeed, ScalingLaw,
};

/// Revision of the command-line interface and output formats.
pub const INTERFACE_REVISION: &str = "interface revision 1";

pub const DEFAULT_SEED: u64 = 20_240_601;

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (interface revision 1)");

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Mean,
    Categorical,
    Ols,
    Mnl,
}

#[derive(Debug, Parser)]
#[command(name = "ftppi", version = VERSION, about = "Fine-tune-then-rectify sample allocation")]
pub struct Cli {
    /// Master seed for every stochastic step.
    #[arg(long, global = true, env = "FTPPI_SEED", default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Worker threads, 0 for one per core.
    #[arg(long, global = true, env = "FTPPI_THREADS", default_value_t = 0)]
    pub threads: usize,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit `a * s^-alpha + b` to `s,variance` observations.
    FitScaling {
        #[arg(long)]
        observations: PathBuf,
    },
    /// Optimal fine-tuning split for a known law.
    #[command(allow_negative_numbers = true)]
    Allocate {
        #[arg(long)]
        a: f64,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        b: f64,
        #[arg(long)]
        n: u64,
        /// Outcome variance; enables the feasibility check.
        #[arg(long)]
        sigma_sq: Option<f64>,
    },
    /// Rectified mean from precomputed predictions.
    EstimateMean {
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        unlabeled: PathBuf,
        #[arg(long)]
        predictions_labeled: PathBuf,
        #[arg(long)]
        predictions_unlabeled: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
    },
    /// Rectified M-estimate with sandwich intervals.
    EstimateM {
        #[arg(long, value_enum)]
        loss: LossArg,
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        unlabeled: PathBuf,
        #[arg(long)]
        predictions_labeled: PathBuf,
        #[arg(long)]
        predictions_unlabeled: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        /// Number of categories (categorical loss).
        #[arg(long)]
        categories: Option<usize>,
        /// Number of inside options (MNL loss).
        #[arg(long)]
        options: Option<usize>,
    },
    /// Run a simulation scenario and write CSVs into `out`.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Staged ramp-up on labeled data with a simulated trainer.
    Rampup {
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        /// Synthetic world whose trainer stands in for fine-tuning.
        #[arg(long)]
        simulator: PathBuf,
        /// Unlabeled pool; drawn from the simulator when absent.
        #[arg(long)]
        unlabeled: Option<PathBuf>,
        #[arg(long, default_value_t = 100_000)]
        pool_size: usize,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
    },
    /// Two-level bootstrap of the fitted law and optimal fraction.
    Bootstrap {
        #[arg(long)]
        simulator: PathBuf,
        #[arg(long, default_value_t = 10)]
        b_d: usize,
        #[arg(long, default_value_t = 5)]
        b_eps: usize,
        #[arg(long, default_value_t = 5000)]
        n_fit: usize,
        #[arg(long, default_value_t = 1200)]
        resamples: usize,
    },
}

impl Command {
    fn input_paths(&self) -> Vec<&Path> {
        match self {
            Command::FitScaling { observations } => vec![observations],
            Command::Allocate { .. } => vec![],
            Command::Simulate { scenario, .. } => vec![scenario],
            Command::EstimateMean {
                labeled,
                unlabeled,
                predictions_labeled,
                predictions_unlabeled,
                ..
            }
            | Command::EstimateM {
                labeled,
                unlabeled,
                predictions_labeled,
                predictions_unlabeled,
                ..
            } => vec![labeled, unlabeled, predictions_labeled, predictions_unlabeled],
            Command::Rampup {
                labeled,
                plan,
                simulator,
                unlabeled,
                ..
            } => {
                let mut v: Vec<&PathBuf> = vec![labeled, plan, simulator];
                v.extend(unlabeled);
                v
            }
            Command::Bootstrap { simulator, .. } => vec![simulator],
        }
        .into_iter()
        .map(|p| p.as_path())
        .collect()
    }
}

/// Machine-readable failure: `kind` is a stable snake_case tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: String,
    pub message: String,
}

impl CliError {
    pub fn new(kind: &str, message: impl Into<String>) -> Self {
        Self {
            kind: kind.to_string(),
            message: message.into(),
        }
    }

    /// Single-line JSON for stderr.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({ "error": self.kind, "message": self.message }).to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::new(e.kind(), e.to_string())
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::new("io", format!("{}: {e}", path.display()))
}

fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| io_error(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::new("json", format!("{}: {e}", path.display())))
}

/// Rounds every float in `v` to 12 significant digits.
pub fn round_numbers(v: Value) -> Value {
    match v {
        Value::Number(n) if !(n.is_i64() || n.is_u64()) => {
            let x = round_sig(n.as_f64().expect("finite json number"), 12);
            serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number)
        }
        Value::Array(items) => Value::Array(items.into_iter().map(round_numbers).collect()),
        Value::Object(map) => Value::Object(map.into_iter().map(|(k, v)| (k, round_numbers(v))).collect()),
        other => other,
    }
}

/// One-line JSON with 12 significant digits.
pub fn json_line<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable output");
    round_numbers(v).to_string()
}

fn scalar_cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(scalar_cell).collect::<Vec<_>>().join(";"),
        other => other.to_string(),
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), scalar_cell(other))),
    }
}

/// Header plus one row per record, nested fields joined with `.`.
pub fn csv_table<T: Serialize>(records: &[T]) -> String {
    let rows: Vec<Vec<(String, String)>> = records
        .iter()
        .map(|r| {
            let mut cells = Vec::new();
            flatten(
                "",
                &round_numbers(serde_json::to_value(r).expect("serializable output")),
                &mut cells,
            );
            cells
        })
        .collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    if let Some(first) = rows.first() {
        w.write_record(first.iter().map(|(k, _)| k.as_str()))
            .expect("in-memory write");
    }
    for row in &rows {
        w.write_record(row.iter().map(|(_, v)| v.as_str()))
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8")
}

fn render<T: Serialize>(format: Format, value: &T) -> String {
    match format {
        Format::Json => json_line(value) + "\n",
        Format::Csv => csv_table(std::slice::from_ref(value)),
    }
}

/// Output of `allocate`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AllocateOutput {
    pub n: u64,
    pub s_star: f64,
    pub s_star_int: u64,
    pub fraction: f64,
    pub objective: f64,
    pub objective_at_int: f64,
    pub feasible: Option<bool>,
    pub threshold: Option<f64>,
}

impl From<ftppi::AllocationResult> for AllocateOutput {
    fn from(r: ftppi::AllocationResult) -> Self {
        Self {
            n: r.n,
            s_star: r.s_star_real,
            s_star_int: r.s_star_int,
            fraction: r.fraction,
            objective: r.objective_value,
            objective_at_int: r.objective_at_int,
            feasible: r.feasible,
            threshold: r.threshold,
        }
    }
}

fn labeled_and_predictions(
    labeled: &Path,
    unlabeled: &Path,
    predictions_labeled: &Path,
    predictions_unlabeled: &Path,
) -> Result<(ftppi::LabeledDataset, ftppi::UnlabeledDataset, Vec<f64>, Vec<f64>), CliError> {
    let lab = read_labeled_csv(open(labeled)?)?;
    let pool = read_unlabeled_csv(open(unlabeled)?)?;
    let fl = read_predictions_csv(open(predictions_labeled)?)?;
    let fu = read_predictions_csv(open(predictions_unlabeled)?)?;
    if fl.len() != lab.len() {
        return Err(Error::DimensionMismatch {
            row: fl.len().min(lab.len()),
            expected: lab.len(),
            found: fl.len(),
        }
        .into());
    }
    if fu.len() != pool.len() {
        return Err(Error::DimensionMismatch {
            row: fu.len().min(pool.len()),
            expected: pool.len(),
            found: fu.len(),
        }
        .into());
    }
    Ok((lab, pool, fl, fu))
}

fn loss_kind(
    loss: LossArg,
    dim: usize,
    labels: &[f64],
    categories: Option<usize>,
    options: Option<usize>,
) -> Result<LossKind, CliError> {
    Ok(match loss {
        LossArg::Mean => LossKind::Mean,
        LossArg::Ols => LossKind::LinearRegression(dim),
        LossArg::Categorical => {
            let d = categories.unwrap_or_else(|| labels.iter().fold(0.0f64, |m, &v| m.max(v)) as usize);
            LossKind::Categorical(d)
        }
        LossArg::Mnl => {
            let k =
                options.ok_or_else(|| CliError::new("invalid_parameter", "--options is required for the mnl loss"))?;
            if k == 0 || dim % k != 0 {
                return Err(CliError::new(
                    "invalid_parameter",
                    format!("{dim} feature columns do not split into {k} options"),
                ));
            }
            LossKind::Mnl {
                options: k,
                features: dim / k,
            }
        }
    })
}

/// Runs one command and returns what it prints on stdout.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    for p in cli.command.input_paths() {
        if !p.exists() {
            return Err(CliError::new("io", format!("input not found: {}", p.display())));
        }
    }
    if cli.threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    let seed = RngSeed(cli.seed);
    match &cli.command {
        Command::FitScaling { observations } => {
            let obs = read_observations_csv(open(observations)?)?;
            Ok(render(cli.format, &fit_scaling_law(&obs)?.report()))
        }
        Command::Allocate {
            a,
            alpha,
            b,
            n,
            sigma_sq,
        } => {
            let law = ScalingLaw::new(*a, *alpha, *b)?;
            let result = match sigma_sq {
                Some(v) => solve_with_feasibility(&FeasibilityInput::new(law, *n, *v)?)?,
                None => solve_optimal_allocation(&law, *n)?,
            };
            Ok(render(cli.format, &AllocateOutput::from(result)))
        }
        Command::EstimateMean {
            labeled,
            unlabeled,
            predictions_labeled,
            predictions_unlabeled,
            delta,
        } => {
            let (lab, _, fl, fu) =
                labeled_and_predictions(labeled, unlabeled, predictions_labeled, predictions_unlabeled)?;
            let report =
                PpiMeanInputs::from_predictions(lab.outcomes().to_vec(), fl, fu)?.report(*delta, Method::FtPpi)?;
            Ok(render(cli.format, &report))
        }
        Command::EstimateM {
            loss,
            labeled,
            unlabeled,
            predictions_labeled,
            predictions_unlabeled,
            delta,
            categories,
            options,
        } => {
            let (lab, pool, fl, fu) =
                labeled_and_predictions(labeled, unlabeled, predictions_labeled, predictions_unlabeled)?;
            if lab.dim() != pool.dim() {
                return Err(Error::DimensionMismatch {
                    row: 0,
                    expected: lab.dim(),
                    found: pool.dim(),
                }
                .into());
            }
            let kind = loss_kind(*loss, lab.dim(), lab.outcomes(), *categories, *options)?;
            let model = builtin_loss(kind)?;
            let pool_x: Vec<f64> = pool.iter().flatten().copied().collect();
            let data = MEstimationData::new(
                lab.dim(),
                lab.features().to_vec(),
                lab.outcomes().to_vec(),
                fl,
                pool_x,
                fu,
            )?;
            data.check_against(model.as_ref())?;
            let sol = solve_ppi_m_estimator(model.as_ref(), &data, &vec![0.0; model.dim()])?;
            let cov = sandwich_covariance(model.as_ref(), &data, &sol.theta)?;
            Ok(render(cli.format, &m_estimate_ci(&cov, &sol.theta, *delta)?))
        }
        Command::Simulate { scenario, out } => {
            let text = fs::read_to_string(scenario).map_err(|e| io_error(scenario, e))?;
            let sc = Scenario::from_json(&text)?;
            let files = run_scenario(&sc, seed)?.to_csv_files()?;
            fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
            let mut written = Vec::new();
            for (name, body) in &files {
                let path = out.join(name);
                fs::write(&path, body).map_err(|e| io_error(&path, e))?;
                written.push(name.clone());
            }
            Ok(render(cli.format, &serde_json::json!({ "files": written })))
        }
        Command::Rampup {
            labeled,
            plan,
            simulator,
            unlabeled,
            pool_size,
            delta,
        } => {
            let data = read_labeled_csv(open(labeled)?)?;
            let plan: RampUpPlan = read_json(plan)?;
            let world: SyntheticWorld = read_json(simulator)?;
            world.validate()?;
            let trainer = world.trainer(seed.derive(1));
            let trace = run_rampup(&data, &plan, &trainer, seed.derive(2))?;
            let pool = match unlabeled {
                Some(p) => read_unlabeled_csv(open(p)?)?,
                None => world.generate(0, *pool_size, seed.derive(3))?.1,
            };
            let estimate = match trace.final_allocation {
                Some(_) => Some(rampup_final_estimate(&trace, &data, &pool, &trainer, *delta)?),
                None => None,
            };
            let summary = serde_json::json!({
                "final": trace.final_allocation,
                "failure": trace.failure,
                "estimate": estimate,
            });
            Ok(match cli.format {
                Format::Json => {
                    let mut s = String::new();
                    for rec in &trace.stages {
                        s.push_str(&json_line(rec));
                        s.push('\n');
                    }
                    s.push_str(&json_line(&summary));
                    s.push('\n');
                    s
                }
                Format::Csv => csv_table(&trace.stages),
            })
        }
        Command::Bootstrap {
            simulator,
            b_d,
            b_eps,
            n_fit,
            resamples,
        } => {
            let world: SyntheticWorld = read_json(simulator)?;
            world.validate()?;
            let report = bootstrap_robustness(&world, *b_d, *b_eps, *n_fit, *resamples, seed)?;
            Ok(match cli.format {
                Format::Json => json_line(&report) + "\n",
                Format::Csv => csv_table(&report.fits),
            })
        }
    }
}

/// Parses `args`, runs, and returns `(exit code, stdout, stderr)`.
pub fn main_with_args<I, T>(args: I) -> (i32, String, String)
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => (0, e.to_string(), String::new()),
                _ => {
                    let first = e
                        .to_string()
                        .lines()
                        .next()
                        .unwrap_or("")
                        .trim_start_matches("error: ")
                        .to_string();
                    (2, String::new(), CliError::new("usage", first).to_json_line() + "\n")
                }
            };
        }
    };
    match run(&cli) {
        Ok(out) => (0, out, String::new()),
        Err(e) => (2, String::new(), e.to_json_line() + "\n"),
    }
}
