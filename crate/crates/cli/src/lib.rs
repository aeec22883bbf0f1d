//! Command implementations behind the `spike-spectra` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::{json, Value};

use spike_spectra::ensemble::csv_row;
use spike_spectra::identities::run_battery;
use spike_spectra::inference::{eigenvalues_from_data, estimate_all, DEFAULT_ALPHA, DEFAULT_EDGE_MARGIN};
use spike_spectra::model::{decompose_direction, DirectionSpec, LawKind, LawSpec, ModelSpec, SpikeSpec, SpikeVectorSpec};
use spike_spectra::montecarlo::{run_experiment, ExperimentConfig, ExperimentReport, OutputSpec, Tolerances};
use spike_spectra::predictor::predict;
use spike_spectra::Error;

pub mod tables;

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
const DEFAULT_PREDICT_N: usize = 10_000;

#[derive(Debug, Parser)]
#[command(name = "spike-spectra", version, about = "Fluctuations of outliers in spiked sample covariance matrices")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Limits and limiting covariance for one outlier and one direction.
    Predict(PredictArgs),
    /// Run trials and write per-trial observations as CSV.
    Simulate(ExperimentArgs),
    /// Run trials and test them against the predicted law.
    Verify(ExperimentArgs),
    /// Detect outliers and estimate spike strengths from eigenvalues or a data matrix.
    Estimate(EstimateArgs),
    /// Run the analytic and numerical identity battery.
    Identities(IdentitiesArgs),
    /// Histogram and QQ tables from a verification report.
    PlotTables(PlotArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Spike strengths, in decreasing order.
    #[arg(long, value_delimiter = ',')]
    pub d: Vec<f64>,
    /// Aspect ratio M/N; used when M is not given.
    #[arg(long)]
    pub y: Option<f64>,
    #[arg(long = "M")]
    pub m: Option<usize>,
    #[arg(long = "N")]
    pub n: Option<usize>,
    /// Spike vectors: e_k or uniform, one per spike (default e_1, e_2, ...).
    #[arg(long, value_delimiter = ',')]
    pub v: Vec<String>,
    /// Direction: vi (the observed spike), v_k, perp, uniform or file:PATH.
    #[arg(long, default_value = "vi")]
    pub w: String,
    /// 1-based index of the observed outlier.
    #[arg(long, default_value_t = 1)]
    pub spike: usize,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Model JSON file; replaces the inline model flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0.0)]
    pub kappa4: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LawArg {
    Gaussian,
    Rademacher,
    ThreePoint,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Experiment JSON file; inline flags are used when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum)]
    pub law: Option<LawArg>,
    #[arg(long)]
    pub kappa3: Option<f64>,
    #[arg(long)]
    pub kappa4: Option<f64>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, env = "SPIKE_SPECTRA_WORKERS")]
    pub workers: Option<usize>,
    /// Output path: CSV for simulate, report JSON for verify.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the report JSON here (simulate only).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Eigenvalues one per line, or with --y-from-shape a data matrix (rows = variables).
    #[arg(long)]
    pub input: PathBuf,
    /// Treat the input as a data matrix and take M, N from its shape.
    #[arg(long)]
    pub y_from_shape: bool,
    #[arg(long = "M")]
    pub m: Option<usize>,
    #[arg(long = "N")]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub kappa4: f64,
    /// Assumed fourth moment sum of the spike vector.
    #[arg(long, default_value_t = 0.0)]
    pub s4: f64,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = DEFAULT_EDGE_MARGIN)]
    pub edge_margin: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IdentitiesArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub report: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Error carrying the exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::TrialBudget { .. } => EXIT_FAIL,
            _ => EXIT_USAGE,
        };
        Failure { code, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_USAGE, message: message.into() }
}

type CmdResult = std::result::Result<i32, Failure>;

pub fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Predict(a) => cmd_predict(a),
        Command::Simulate(a) => cmd_experiment(a, false),
        Command::Verify(a) => cmd_experiment(a, true),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Identities(a) => cmd_identities(a),
        Command::PlotTables(a) => cmd_plot_tables(a),
    }
}

fn read_text(path: &Path) -> std::result::Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

fn emit(text: &str, out: Option<&Path>) -> std::result::Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| usage(format!("cannot write {}: {e}", p.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| if text.ends_with('\n') { Ok(()) } else { stdout.write_all(b"\n") })
                .map_err(|e| usage(format!("cannot write to stdout: {e}")))
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

impl ModelArgs {
    fn dims(&self) -> std::result::Result<(usize, usize), Failure> {
        match (self.m, self.n, self.y) {
            (Some(m), Some(n), None) => Ok((m, n)),
            (Some(m), Some(n), Some(y)) => {
                if (m as f64 / n as f64 - y).abs() > 1e-12 {
                    return Err(usage(format!("--y {y} disagrees with --M {m} --N {n}")));
                }
                Ok((m, n))
            }
            (None, n, Some(y)) => {
                let n = n.unwrap_or(DEFAULT_PREDICT_N);
                let m = (y * n as f64).round() as usize;
                if m == 0 {
                    return Err(usage(format!("--y {y} gives M = 0 at N = {n}")));
                }
                Ok((m, n))
            }
            (Some(m), None, Some(y)) => {
                let n = (m as f64 / y).round() as usize;
                Ok((m, n))
            }
            _ => Err(usage("give --y, or --M and --N")),
        }
    }

    fn model_spec(&self) -> std::result::Result<ModelSpec, Failure> {
        if self.d.is_empty() {
            return Err(usage("at least one --d is required"));
        }
        let (m, n) = self.dims()?;
        if !self.v.is_empty() && self.v.len() != self.d.len() {
            return Err(usage(format!("{} spike vectors given for {} spikes", self.v.len(), self.d.len())));
        }
        let spikes = self
            .d
            .iter()
            .enumerate()
            .map(|(k, d)| SpikeSpec {
                d: *d,
                v: SpikeVectorSpec::Named(self.v.get(k).cloned().unwrap_or_else(|| format!("e_{}", k + 1))),
            })
            .collect();
        Ok(ModelSpec { m, n, spikes, delta: spike_spectra::model::DEFAULT_DELTA })
    }

    fn direction(&self) -> std::result::Result<DirectionSpec, Failure> {
        direction_from_flag(&self.w, self.spike)
    }
}

/// `vi`, `v_k`, `perp`, `uniform` or `file:PATH` with whitespace or comma separated entries.
pub fn direction_from_flag(w: &str, spike: usize) -> std::result::Result<DirectionSpec, Failure> {
    if w == "vi" {
        return Ok(DirectionSpec::spike(spike));
    }
    if let Some(path) = w.strip_prefix("file:") {
        let values = parse_floats(&read_text(Path::new(path))?)
            .map_err(|e| usage(format!("{path}: {e}")))?
            .into_iter()
            .flatten()
            .collect();
        return Ok(DirectionSpec::Explicit(values));
    }
    Ok(DirectionSpec::Named(w.to_string()))
}

/// Rows of numbers separated by commas or whitespace; blank lines and `#` comments skipped.
pub fn parse_floats(text: &str) -> std::result::Result<Vec<Vec<f64>>, String> {
    let mut rows = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|e| format!("line {}: {s:?}: {e}", k + 1)))
            .collect::<std::result::Result<Vec<f64>, String>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn cmd_predict(a: PredictArgs) -> CmdResult {
    let spec: ModelSpec = match &a.config {
        Some(p) => serde_json::from_str(&read_text(p)?).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => a.model.model_spec()?,
    };
    let model = spec.build()?;
    let i = a.model.spike.checked_sub(1).ok_or_else(|| usage("--spike is 1-based"))?;
    model.require_outlier(i)?;
    let dspec = a.model.direction()?;
    let dir = decompose_direction(&model, &dspec.resolve(&model)?)?;
    let pred = predict(&model, &dir, i, a.kappa4)?;
    let mut out = json!({
        "M": model.m(),
        "N": model.n(),
        "y": model.y(),
        "d": model.d(i),
        "spike": a.model.spike,
        "direction": dspec.to_string(),
        "kappa4": a.kappa4,
    });
    if let (Value::Object(o), Value::Object(p)) = (&mut out, serde_json::to_value(&pred).expect("serializable")) {
        o.extend(p);
    }
    emit(&to_json(&out), a.out.as_deref())?;
    Ok(EXIT_PASS)
}

fn experiment_config(a: &ExperimentArgs) -> std::result::Result<ExperimentConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_str::<ExperimentConfig>(&read_text(p)?)
            .map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => ExperimentConfig {
            model: a.model.model_spec()?,
            directions: vec![a.model.direction()?],
            law: LawSpec { kind: LawKind::Gaussian, kappa3: None, kappa4: None },
            spike: a.model.spike,
            trials: a.trials.ok_or_else(|| usage("--trials is required without --config"))?,
            seed: 0,
            workers: None,
            tolerances: Tolerances::default(),
            expected: None,
            outputs: OutputSpec::default(),
        },
    };
    if let Some(law) = a.law {
        cfg.law.kind = match law {
            LawArg::Gaussian => LawKind::Gaussian,
            LawArg::Rademacher => LawKind::Rademacher,
            LawArg::ThreePoint => LawKind::ThreePoint,
        };
    }
    if a.kappa3.is_some() {
        cfg.law.kappa3 = a.kappa3;
    }
    if a.kappa4.is_some() {
        cfg.law.kappa4 = a.kappa4;
    }
    if let Some(t) = a.trials {
        cfg.trials = t;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_experiment(a: ExperimentArgs, verify: bool) -> CmdResult {
    let cfg = experiment_config(&a)?;
    let workers = a.workers.or(cfg.workers);
    eprintln!("config_hash {} seed {} trials {}", cfg.hash(), cfg.seed, cfg.trials);
    let outcome = run_experiment(&cfg, workers)?;
    let report_json = to_json(&outcome.report);
    if verify {
        let out = a.out.clone().or_else(|| cfg.outputs.report.clone().map(PathBuf::from));
        emit(&report_json, out.as_deref())?;
        for c in outcome.report.checks.iter().filter(|c| !c.pass) {
            eprintln!("FAIL {}: observed {} expected {} tolerance {}", c.name, c.observed, c.expected, c.tolerance);
        }
        eprintln!("verdict {}", if outcome.report.pass { "pass" } else { "fail" });
        return Ok(if outcome.report.pass { EXIT_PASS } else { EXIT_FAIL });
    }
    let mut csv = outcome.plan.csv_header(&outcome.direction_names);
    csv.push('\n');
    for obs in &outcome.observations {
        csv.push_str(&csv_row(obs));
        csv.push('\n');
    }
    let out = a.out.clone().or_else(|| cfg.outputs.trials_csv.clone().map(PathBuf::from));
    emit(&csv, out.as_deref())?;
    if let Some(p) = a.report.clone().or_else(|| cfg.outputs.report.clone().map(PathBuf::from)) {
        emit(&report_json, Some(&p))?;
    }
    Ok(EXIT_PASS)
}

fn cmd_estimate(a: EstimateArgs) -> CmdResult {
    let rows = parse_floats(&read_text(&a.input)?).map_err(|e| usage(format!("{}: {e}", a.input.display())))?;
    let (eigenvalues, m, n) = if a.y_from_shape {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if m == 0 || n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(usage("data matrix must be non-empty and rectangular"));
        }
        let data = DMatrix::from_fn(m, n, |r, c| rows[r][c]);
        (eigenvalues_from_data(&data)?, m, n)
    } else {
        let (m, n) = match (a.m, a.n) {
            (Some(m), Some(n)) => (m, n),
            _ => return Err(usage("an eigenvalue list needs --M and --N (or pass a data matrix with --y-from-shape)")),
        };
        let mut values: Vec<f64> = rows.into_iter().flatten().collect();
        values.sort_by(|x, y| y.total_cmp(x));
        (values, m, n)
    };
    let estimates = estimate_all(&eigenvalues, m, n, a.kappa4, a.s4, a.alpha, a.edge_margin)?;
    emit(&to_json(&estimates), a.out.as_deref())?;
    Ok(EXIT_PASS)
}

fn cmd_identities(a: IdentitiesArgs) -> CmdResult {
    let report = run_battery(a.seed)?;
    let summary: serde_json::Map<String, Value> =
        report.checks.iter().map(|(k, v)| (k.clone(), json!(v.max_residual))).collect();
    emit(&to_json(&summary), a.out.as_deref())?;
    for (name, c) in report.checks.iter().filter(|(_, c)| !c.pass) {
        eprintln!("FAIL {name}: {} > {}", c.max_residual, c.tolerance);
    }
    Ok(if report.pass { EXIT_PASS } else { EXIT_FAIL })
}

fn cmd_plot_tables(a: PlotArgs) -> CmdResult {
    let report: ExperimentReport = serde_json::from_str(&read_text(&a.report)?)
        .map_err(|e| usage(format!("{}: {e}", a.report.display())))?;
    fs::create_dir_all(&a.out).map_err(|e| usage(format!("cannot create {}: {e}", a.out.display())))?;
    for table in tables::plot_tables(&report)? {
        match table.content {
            Some((hist, qq)) => {
                fs::write(a.out.join(format!("hist_{}.csv", table.name)), hist)
                    .and_then(|_| fs::write(a.out.join(format!("qq_{}.csv", table.name)), qq))
                    .map_err(|e| usage(format!("cannot write tables: {e}")))?;
            }
            None => eprintln!("notice: {} has no observations; tables omitted", table.name),
        }
    }
    Ok(EXIT_PASS)
}
