//! The `crr` command-line tool.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{AreTargetName, RunConfig};
use crate::data::Dataset;
use crate::efficiency::{self, AreReport};
use crate::error::{Error, Result};
use crate::io;
use crate::kernels::{KernelFamily, KernelSpec, LossConfig};
use crate::pipeline::{self, StageTimings};
use crate::sim::{self, ErrorKind};

#[derive(Debug, Parser)]
#[command(name = "crr", version, about = "Penalized convoluted rank regression with simultaneous inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a penalized model and write the coefficients as JSON.
    Fit(FitArgs),
    /// Debias a fit and write simultaneous confidence intervals as CSV.
    Infer(InferArgs),
    /// Run coverage experiments; completed scenario ids are skipped.
    Simulate(SimulateArgs),
    /// Asymptotic relative efficiency against a competing estimator.
    Are(AreArgs),
    /// Keep the predictors with the largest absolute Kendall's tau.
    Screen(ScreenArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Index set: `all`, `a..b` or a comma list (1-based).
    #[arg(long = "G")]
    pub g: Option<String>,
    /// Bootstrap replications.
    #[arg(long = "B")]
    pub b: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Interval table; a JSON report is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scenarios: PathBuf,
    /// Results table; a JSON sidecar is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AreArgs {
    #[arg(long)]
    pub error: Option<ErrorKind>,
    #[arg(long)]
    pub kernel: Option<KernelFamily>,
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long)]
    pub target: Option<AreTargetName>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write the JSON report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScreenArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub keep: usize,
    /// Screened dataset (`y` plus kept columns in rank order); the ranking is
    /// written as a JSON sidecar.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct Provenance {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    seed: u64,
    /// The effective configuration with unset keys omitted.
    config: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<DataInfo>,
}

#[derive(Debug, Serialize)]
struct DataInfo {
    path: String,
    n: usize,
    p: usize,
    standardized: bool,
}

impl Provenance {
    fn new(command: &'static str, config: &RunConfig, data: Option<(&Path, &Dataset)>) -> Self {
        Provenance {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed: config.seed(),
            config: strip_nulls(serde_json::to_value(config).unwrap_or(Value::Null)),
            data: data.map(|(path, d)| DataInfo {
                path: path.display().to_string(),
                n: d.n(),
                p: d.p(),
                standardized: d.is_standardized(),
            }),
        }
    }
}

fn strip_nulls(v: Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(
            m.into_iter()
                .filter(|(_, v)| !v.is_null())
                .map(|(k, v)| (k, strip_nulls(v)))
                .filter(|(_, v)| !matches!(v, Value::Object(o) if o.is_empty()))
                .collect(),
        ),
        Value::Array(a) => Value::Array(a.into_iter().map(strip_nulls).collect()),
        other => other,
    }
}

/// Parses arguments and runs the command on a worker pool of the configured size.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit(a) => {
            let cfg = load_config(a.config.as_deref(), a.seed)?;
            with_pool(&cfg, || cmd_fit(&a, &cfg))
        }
        Command::Infer(a) => {
            let mut cfg = load_config(a.config.as_deref(), a.seed)?;
            if let Some(alpha) = a.alpha {
                cfg.boot.alpha = Some(alpha);
            }
            if let Some(g) = &a.g {
                cfg.boot.g = Some(crate::config::IndexSetting::Text(g.clone()));
            }
            if let Some(b) = a.b {
                cfg.boot.b = Some(b);
            }
            with_pool(&cfg, || cmd_infer(&a, &cfg))
        }
        Command::Simulate(a) => {
            let cfg = RunConfig::load(&a.scenarios).map_err(|e| e.in_stage("config"))?;
            with_pool(&cfg, || cmd_simulate(&a, &cfg))
        }
        Command::Are(a) => {
            let cfg = load_config(a.config.as_deref(), None)?;
            cmd_are(&a, &cfg).map(|_| ())
        }
        Command::Screen(a) => {
            let cfg = RunConfig::default();
            with_pool(&cfg, || cmd_screen(&a, &cfg))
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).map_err(|e| e.in_stage("config"))?,
        None => RunConfig::default(),
    };
    if seed.is_some() {
        cfg.seed = seed;
    }
    if !cfg.scenario.is_empty() {
        return Err(Error::Config("[[scenario]] tables are only valid for `simulate`".into()).in_stage("config"));
    }
    Ok(cfg)
}

fn with_pool<T: Send>(cfg: &RunConfig, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cfg.threads().map_err(|e| e.in_stage("config"))? {
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(f)
}

fn load_data(path: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let d = io::load_csv(path).map_err(|e| e.in_stage("load data"))?;
    if cfg.standardize {
        d.standardize().map_err(|e| e.in_stage("standardize"))
    } else {
        Ok(d)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::Io(e).in_stage("write output"))
}

/// `sci.csv` → `sci.json`; a `.json` output gets `.report.json` instead.
pub fn sidecar_path(out: &Path) -> PathBuf {
    if out.extension().is_some_and(|e| e == "json") {
        out.with_extension("report.json")
    } else {
        out.with_extension("json")
    }
}

fn cmd_fit(a: &FitArgs, cfg: &RunConfig) -> Result<()> {
    let data = load_data(&a.data, cfg)?;
    let settings = cfg.fit_settings().map_err(|e| e.in_stage("config"))?;
    let mut t = StageTimings::default();
    let sel = t.time("fit", || pipeline::fit_selected(&data, &settings))?;
    let support: Vec<usize> = sel.fit.support().iter().map(|k| k + 1).collect();
    let report = json!({
        "provenance": Provenance::new("fit", cfg, Some((&a.data, &data))),
        "result": {
            "penalty": sel.penalty,
            "lambda": sel.penalty.lambda,
            "lambda_select": sel.selection,
            "lambda_grid": sel.grid,
            "names": data.names(),
            "beta_hat": sel.fit.beta_hat.to_vec(),
            "support": support,
            "objective": sel.fit.objective_value,
            "loss": sel.fit.loss_value,
            "iterations": sel.fit.iterations,
            "converged": sel.fit.converged,
        },
        "timing": timing_json(&t),
    });
    write_json(&a.out, &report)
}

fn timing_json(t: &StageTimings) -> Value {
    let stages: serde_json::Map<String, Value> = t.0.iter().map(|(s, secs)| (s.clone(), json!(secs))).collect();
    json!({ "stages_seconds": stages, "total_seconds": t.total() })
}

fn cmd_infer(a: &InferArgs, cfg: &RunConfig) -> Result<()> {
    let data = load_data(&a.data, cfg)?;
    let settings = cfg.inference_settings().map_err(|e| e.in_stage("config"))?;
    let out = pipeline::run_inference(&data, &settings)?;

    let write_table = || -> Result<()> {
        let mut w = csv::Writer::from_path(&a.out)?;
        w.write_record(["k", "name", "beta_tilde", "lower", "upper", "excludes_zero"])?;
        for r in &out.sci.rows {
            w.write_record([
                r.k.to_string(),
                data.names()[r.k - 1].clone(),
                r.beta_tilde.to_string(),
                r.lower.to_string(),
                r.upper.to_string(),
                r.excludes_zero.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    };
    write_table().map_err(|e| e.in_stage("write output"))?;

    let prec = &out.precision;
    let report = json!({
        "provenance": Provenance::new("infer", cfg, Some((&a.data, &data))),
        "result": {
            "lambda": out.fit.penalty.lambda,
            "lambda_select": out.fit.selection,
            "converged": out.fit.fit.converged,
            "names": data.names(),
            "beta_hat": out.debiased.beta_hat.to_vec(),
            "beta_tilde": out.debiased.beta_tilde.to_vec(),
            "gamma_requested": prec.gamma_requested,
            "gamma_used": prec.gamma_n,
            "inflated_rows": prec.inflated_rows.iter().map(|k| k + 1).collect::<Vec<_>>(),
            "max_violation": prec.max_violation,
            "inverse_gap": prec.inverse_gap,
            "q_star": out.sci.q_star,
            "alpha": out.bootstrap.alpha,
            "B": out.bootstrap.b,
            "G": settings.boot.g.to_string(),
            "studentized": out.sci.studentized,
            "intervals": out.sci.rows,
        },
        "timing": timing_json(&out.timings),
    });
    write_json(&sidecar_path(&a.out), &report)
}

const SIM_HEADER: [&str; 6] = ["scenario_id", "cr", "al", "mc_se", "reps", "failures"];

fn completed_ids(path: &Path) -> Result<Vec<String>> {
    if !path.exists() || fs::metadata(path)?.len() == 0 {
        return Ok(Vec::new());
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != SIM_HEADER {
        return Err(Error::Data(format!("{} exists but is not a results table", path.display())));
    }
    rdr.records().map(|r| Ok(r?.get(0).unwrap_or_default().to_string())).collect()
}

fn cmd_simulate(a: &SimulateArgs, cfg: &RunConfig) -> Result<()> {
    let scenarios = cfg.scenarios().map_err(|e| e.in_stage("config"))?;
    let done = completed_ids(&a.out).map_err(|e| e.in_stage("resume"))?;
    let sidecar = sidecar_path(&a.out);
    let mut runs: Vec<Value> = match fs::read_to_string(&sidecar) {
        Ok(text) if !done.is_empty() => {
            let v: Value = serde_json::from_str(&text).map_err(|e| Error::Json(e).in_stage("resume"))?;
            v.get("runs").and_then(Value::as_array).cloned().unwrap_or_default()
        }
        _ => Vec::new(),
    };
    for sc in scenarios.iter().filter(|s| !done.contains(&s.id)) {
        let start = Instant::now();
        let results = sim::run_replications(sc).map_err(|e| e.in_stage("simulate"))?;
        let report = sim::summarize(sc, &results);
        let failures: Vec<&sim::RepResult> = results.iter().filter(|r| matches!(r, sim::RepResult::Failed { .. })).collect();

        let append = || -> Result<()> {
            let file = OpenOptions::new().create(true).append(true).open(&a.out)?;
            let needs_header = file.metadata()?.len() == 0;
            let mut w = csv::Writer::from_writer(file);
            if needs_header {
                w.write_record(SIM_HEADER)?;
            }
            w.write_record([
                report.scenario_id.clone(),
                report.cr.to_string(),
                report.al.to_string(),
                report.mc_se.to_string(),
                report.reps_completed.to_string(),
                report.failures.to_string(),
            ])?;
            w.flush()?;
            Ok(())
        };
        append().map_err(|e| e.in_stage("write output"))?;
        runs.push(json!({
            "scenario": sc,
            "report": report,
            "failed_replications": failures,
            "timing": { "total_seconds": start.elapsed().as_secs_f64() },
        }));
        let doc = json!({ "provenance": Provenance::new("simulate", cfg, None), "runs": runs });
        write_json(&sidecar, &doc)?;
    }
    Ok(())
}

/// Evaluates the requested ratio, prints a summary line and the JSON report.
pub fn cmd_are(a: &AreArgs, cfg: &RunConfig) -> Result<AreReport> {
    let error = a.error.or(cfg.are.error).unwrap_or(ErrorKind::Normal);
    let kernel = a.kernel.or(cfg.kernel).unwrap_or(KernelFamily::Epanechnikov);
    let h = a.h.or(cfg.h).unwrap_or(1.0);
    let target = a.target.or(cfg.are.target).unwrap_or(AreTargetName::Ols);
    let law = error.law();
    let loss = LossConfig::new(KernelSpec::new(kernel), h).map_err(|e| e.in_stage("config"))?;
    let report = match target {
        AreTargetName::Ols => efficiency::are_vs_ols(&law, &loss),
        AreTargetName::Huber => {
            let tau = a.tau.or(cfg.are.tau).ok_or_else(|| Error::Config("target huber requires --tau".into()))?;
            efficiency::are_vs_huber(&law, &loss, tau)
        }
        AreTargetName::Cqr => efficiency::are_vs_cqr(&law, &loss),
        AreTargetName::Composite => efficiency::are_vs_composite(&law, &loss),
    }
    .map_err(|e| e.in_stage("are"))?;

    let limit = match (report.limit, &report.small_h) {
        (Some(l), _) => format!(", h->0 limit {}", fmt_are(l.value())),
        (None, Some(s)) => format!(", small-h extrapolation {:.6}", s.extrapolated),
        _ => String::new(),
    };
    let mut stdout = std::io::stdout().lock();
    writeln!(
        stdout,
        "ARE(crr vs {}) under {} errors, {:?} kernel, h = {}: {}{}",
        report.target,
        report.law,
        kernel,
        h,
        fmt_are(report.are_value.value()),
        limit
    )?;
    let doc = json!({ "provenance": Provenance::new("are", cfg, None), "result": report });
    writeln!(stdout, "{}", serde_json::to_string_pretty(&doc)?)?;
    if let Some(out) = &a.out {
        write_json(out, &doc)?;
    }
    Ok(report)
}

fn fmt_are(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

fn cmd_screen(a: &ScreenArgs, cfg: &RunConfig) -> Result<()> {
    let data = load_data(&a.data, cfg)?;
    let ranking = sim::kendall_screen(&data, a.keep).map_err(|e| e.in_stage("screen"))?;
    let cols: Vec<usize> = ranking.iter().map(|&(j, _)| j).collect();
    let screened = data.select_columns(&cols)?;
    io::save_csv(&screened, &a.out).map_err(|e| e.in_stage("write output"))?;
    let rows: Vec<Value> = ranking
        .iter()
        .enumerate()
        .map(|(r, &(j, tau))| json!({ "rank": r + 1, "column": j + 1, "name": data.names()[j], "tau": tau }))
        .collect();
    let doc = json!({
        "provenance": Provenance::new("screen", cfg, Some((&a.data, &data))),
        "result": { "keep": a.keep, "ranking": rows },
    });
    write_json(&sidecar_path(&a.out), &doc)
}

/// Entry point for the binary: runs and reports failures on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => 0,
        Err(e) => {
            let mut msg = format!("crr: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                if !msg.contains(&s.to_string()) {
                    msg.push_str(&format!(": {s}"));
                }
                src = s.source();
            }
            let _ = writeln!(std::io::stderr(), "{msg}");
            1
        }
    }
}
