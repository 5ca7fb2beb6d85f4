//! Command-line front end.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use crate::domain::EvaluationResult;
use crate::driver::{best_so_far, run, Evaluator, OptimizationReport};
use crate::error::{Error, Result};
use crate::oracle::grid_search;
use crate::protocol::{remote_evaluate, serve, RemoteEvaluator, ENDPOINT_ENV};
use crate::scenario::ScenarioFile;

#[derive(Debug, Parser)]
#[command(name = "cellopt", version, about = "Cycle-time optimal layouts for collaborative robot cells")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run Bayesian optimization on a scenario.
    Optimize {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        remote: RemoteArgs,
        /// Where to write the JSON report.
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Serve the scenario's simulator over TCP.
    Serve {
        scenario: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// 0 picks a free port; the bound address is printed.
        #[arg(long, default_value_t = 7878)]
        port: u16,
    },
    /// Evaluate one layout.
    Eval {
        scenario: PathBuf,
        /// Comma- or space-separated coordinates.
        #[arg(long, conflicts_with = "layout_file", allow_hyphen_values = true)]
        layout: Option<String>,
        /// File holding the coordinates, as a JSON array or plain list.
        #[arg(long)]
        layout_file: Option<PathBuf>,
        /// Also print the event timeline.
        #[arg(long)]
        timeline: bool,
        #[command(flatten)]
        remote: RemoteArgs,
    },
    /// Exhaustive grid search over the scenario.
    Oracle {
        scenario: PathBuf,
        /// Points per dimension.
        #[arg(long, default_value_t = 11)]
        grid: usize,
    },
    /// Convert a report into CSV for plotting.
    Report {
        report: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct RemoteArgs {
    /// Evaluate through a remote server instead of the embedded simulator.
    #[arg(long, env = ENDPOINT_ENV)]
    pub endpoint: Option<String>,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 30.0)]
    pub timeout: f64,
}

impl RemoteArgs {
    fn timeout(&self) -> Result<Duration> {
        Duration::try_from_secs_f64(self.timeout)
            .ok()
            .filter(|d| !d.is_zero())
            .ok_or_else(|| Error::config("--timeout", "must be a positive number of seconds"))
    }
}

pub const CSV_HEADER: &str = "iteration,objective_s,incumbent_s,kappa,feasible";

/// Runs a parsed command and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let mut out = std::io::stdout().lock();
    match dispatch(cli.command, &mut out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, out: &mut dyn std::io::Write) -> Result<i32> {
    match command {
        Command::Optimize { scenario, seed, remote, out: path } => cmd_optimize(&scenario, seed, &remote, &path, out),
        Command::Serve { scenario, host, port } => cmd_serve(&scenario, &host, port, out),
        Command::Eval { scenario, layout, layout_file, timeline, remote } => {
            cmd_eval(&scenario, layout.as_deref(), layout_file.as_deref(), timeline, &remote, out)
        }
        Command::Oracle { scenario, grid } => cmd_oracle(&scenario, grid, out),
        Command::Report { report, csv } => cmd_report(&report, &csv, out),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn format_layout(labels: &[String], x: &[f64]) -> String {
    labels.iter().zip(x).map(|(l, v)| format!("{l}={v}")).collect::<Vec<_>>().join(" ")
}

pub fn cmd_optimize(
    scenario_path: &Path,
    seed: Option<u64>,
    remote: &RemoteArgs,
    report_path: &Path,
    out: &mut dyn std::io::Write,
) -> Result<i32> {
    let scenario = ScenarioFile::load(scenario_path)?;
    let problem = scenario.problem()?;
    let simulator = scenario.simulator()?;
    let mut config = scenario.optimizer.clone();
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let mut evaluator: Box<dyn Evaluator> = match &remote.endpoint {
        Some(endpoint) => {
            let client = RemoteEvaluator::connect(endpoint, remote.timeout()?, simulator.cell().penalty())?;
            if client.dim() != Some(problem.dim()) {
                return Err(Error::DimensionMismatch {
                    expected: problem.dim(),
                    found: client.dim().unwrap_or(0),
                });
            }
            Box::new(client)
        }
        None => Box::new(simulator),
    };
    let report = run(&config, &problem, evaluator.as_mut())?;
    drop(evaluator);
    write_json(report_path, &report)?;
    writeln!(out, "evaluations\t{}", report.records.len())?;
    writeln!(out, "stop_reason\t{}", serde_json::to_string(&report.stop_reason)?.trim_matches('"'))?;
    if !report.complete {
        eprintln!("error: run aborted after repeated transport failures; partial report written");
        return Ok(3);
    }
    let (x, objective) = best_so_far(&report)?;
    writeln!(out, "objective_s\t{objective}")?;
    writeln!(out, "x_opt\t{}", format_layout(&scenario.coordinate_labels(), &x))?;
    Ok(0)
}

pub fn cmd_serve(scenario_path: &Path, host: &str, port: u16, out: &mut dyn std::io::Write) -> Result<i32> {
    let scenario = ScenarioFile::load(scenario_path)?;
    let simulator = scenario.simulator()?;
    let map = std::sync::Arc::new(scenario.entity_map()?);
    let mut ready = Ok(());
    serve(&format!("{host}:{port}"), map, simulator, |addr, handle| {
        ready = writeln!(out, "listening on {addr}").and_then(|_| out.flush());
        let _ = ctrlc::set_handler(move || handle.shutdown());
    })?;
    ready?;
    Ok(0)
}

fn parse_coords(text: &str) -> Result<Vec<f64>> {
    if let Ok(v) = serde_json::from_str::<Vec<f64>>(text.trim()) {
        return Ok(v);
    }
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::config("--layout", format!("`{t}` is not a number")))
        })
        .collect()
}

pub fn cmd_eval(
    scenario_path: &Path,
    layout: Option<&str>,
    layout_file: Option<&Path>,
    timeline: bool,
    remote: &RemoteArgs,
    out: &mut dyn std::io::Write,
) -> Result<i32> {
    let scenario = ScenarioFile::load(scenario_path)?;
    let problem = scenario.problem()?;
    let coords = match (layout, layout_file) {
        (Some(text), _) => parse_coords(text)?,
        (None, Some(path)) => parse_coords(&std::fs::read_to_string(path)?)?,
        (None, None) => return Err(Error::config("--layout", "give --layout or --layout-file")),
    };
    let x = problem.layout(coords)?;
    let result: EvaluationResult = match &remote.endpoint {
        Some(endpoint) => remote_evaluate(endpoint, &x, remote.timeout()?)?,
        None => scenario.simulator()?.evaluate(&x, timeline)?,
    };
    let mut text = String::new();
    let _ = writeln!(text, "objective_s\t{}", result.objective);
    let _ = writeln!(text, "feasible\t{}", result.feasible);
    let _ = writeln!(text, "penalized\t{}", result.penalized);
    let violated = problem.constraint_values(x.coords()).iter().filter(|g| **g > 0.0).count();
    let _ = writeln!(text, "constraints_violated\t{violated}");
    for e in result.timeline.iter().flatten() {
        let _ = writeln!(text, "{}\t{}\t{}\t{}", e.agent, e.action, e.start_s, e.end_s);
    }
    out.write_all(text.as_bytes())?;
    Ok(0)
}

pub fn cmd_oracle(scenario_path: &Path, grid: usize, out: &mut dyn std::io::Write) -> Result<i32> {
    let scenario = ScenarioFile::load(scenario_path)?;
    let problem = scenario.problem()?;
    let mut simulator = scenario.simulator()?;
    let r = grid_search(&problem, grid, &mut simulator)?;
    writeln!(out, "grid_points\t{}", r.grid_points)?;
    writeln!(out, "evaluated\t{}", r.evaluated)?;
    writeln!(out, "objective_s\t{}", r.best_objective)?;
    writeln!(out, "worst_objective_s\t{}", r.worst_objective)?;
    writeln!(out, "x_opt\t{}", format_layout(&scenario.coordinate_labels(), &r.best_x))?;
    Ok(0)
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// CSV rendering of a report, one row per evaluation.
pub fn report_csv(report: &OptimizationReport) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in &report.records {
        let _ = writeln!(s, "{},{},{},{},{}", r.k, r.objective, opt(r.incumbent), opt(r.kappa), r.feasible);
    }
    s
}

pub fn cmd_report(report_path: &Path, csv_path: &Path, out: &mut dyn std::io::Write) -> Result<i32> {
    let text = std::fs::read_to_string(report_path)?;
    let report: OptimizationReport = serde_json::from_str(&text)
        .map_err(|e| Error::config(report_path.display().to_string(), e.to_string()))?;
    std::fs::write(csv_path, report_csv(&report))?;
    writeln!(out, "rows\t{}", report.records.len())?;
    Ok(0)
}
