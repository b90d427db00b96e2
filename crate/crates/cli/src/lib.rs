//! Command-line front end: configuration loading, manifests, and dispatch to
//! the trainer, harness and oracle.
//!
//! Every experiment command resolves its configuration as
//! defaults < `--config`/`--manifest` document < flags, writes the fully
//! resolved document into `manifest.json`, and emits CSVs under
//! `<out>/<command>/<task>/`.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use lagrangelab::envs::registry;
use lagrangelab::harness::{
    reference_lambda_grid, run_cost_limit_sweep, run_csv_path, run_lambda_profile,
    run_stability_compare, write_profile_csv, write_run_csv, write_stability_csv,
    write_sweep_csv, HarnessOptions, KeyedRun, RunFailure, DEFAULT_PROFILE_SEEDS,
    DEFAULT_STABILITY_SEEDS,
};
use lagrangelab::oracle::{lambda_star_report, solve_lp};
use lagrangelab::trainer::train;
use lagrangelab::{ControllerConfig, ControllerKind, Error, TrainConfig, TrainMode};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "LAGRANGELAB_OUT";
pub const DEFAULT_OUT: &str = "runs";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const AGGREGATE_FILE: &str = "aggregate.csv";

#[derive(Debug, Parser)]
#[command(name = "lagrangelab", version, about = "Lagrangian multiplier experiments on tabular CMDPs")]
pub struct Cli {
    /// Output root [default: $LAGRANGELAB_OUT, else the config's `out`, else `runs`]
    #[arg(long, global = true, env = OUT_ENV)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// List the builtin tasks.
    Tasks,
    /// Solve a task with the LP oracle and print the solution as JSON.
    Oracle(OracleArgs),
    /// Train one policy.
    Train(TrainArgs),
    /// Fixed-multiplier profile over a lambda grid.
    Profile(ProfileArgs),
    /// Sweep the cost limit with an adaptive controller.
    Sweep(SweepArgs),
    /// Gradient-ascent vs PID stability comparison.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Exact,
    Sampled,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Exact => TrainMode::ExactDual,
            ModeArg::Sampled => TrainMode::Sampled,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ControllerArg {
    Fixed,
    Ga,
    Pid,
}

impl From<ControllerArg> for ControllerKind {
    fn from(c: ControllerArg) -> Self {
        match c {
            ControllerArg::Fixed => ControllerKind::Fixed,
            ControllerArg::Ga => ControllerKind::Ga,
            ControllerArg::Pid => ControllerKind::Pid,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct OracleArgs {
    /// Builtin task name
    #[arg(long, default_value = "chain-speed")]
    pub task: String,
    /// Replace the task's cost limit [default: the task's own limit]
    #[arg(long)]
    pub cost_limit: Option<f64>,
}

/// Flags shared by every experiment command.
#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON experiment config; unknown keys are rejected [default: none]
    #[arg(long, conflicts_with = "manifest")]
    pub config: Option<PathBuf>,
    /// Re-run the experiment recorded in a manifest [default: none]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Builtin task name [default: chain-speed]
    #[arg(long)]
    pub task: Option<String>,
    /// Trainer mode [default: sampled]
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Training epochs per run [default: 100]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Environment steps per epoch [default: 20000]
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    /// Replace the task's cost limit [default: the task's own limit]
    #[arg(long)]
    pub cost_limit: Option<f64>,
    /// Concurrent runs; 0 uses every core
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Run seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Multiplier controller [default: ga]
    #[arg(long, value_enum)]
    pub controller: Option<ControllerArg>,
    /// Multiplier for the fixed controller [default: 0]
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated multiplier grid [default: the task's reference grid]
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    /// Number of seeds, 0..N [default: 10]
    #[arg(long)]
    pub seeds: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated cost limits [default: none, required here or in the config]
    #[arg(long, value_delimiter = ',')]
    pub limits: Option<Vec<f64>>,
    /// Number of seeds, 0..N [default: 10]
    #[arg(long)]
    pub seeds: Option<u64>,
    /// Multiplier controller [default: ga]
    #[arg(long, value_enum)]
    pub controller: Option<ControllerArg>,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of seeds, 0..N [default: 6]
    #[arg(long)]
    pub seeds: Option<u64>,
}

/// Command document. Every key is optional on input; the manifest echoes
/// the fully resolved document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Base training configuration, including the task and controller.
    pub train: TrainConfig,
    /// Second arm of `compare`.
    pub pid: ControllerConfig,
    pub seeds: Vec<u64>,
    /// Multiplier grid for `profile`; empty means the task's reference grid.
    pub grid: Vec<f64>,
    /// Cost limits for `sweep`.
    pub limits: Vec<f64>,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            pid: ControllerConfig {
                kind: ControllerKind::Pid,
                ..ControllerConfig::default()
            },
            seeds: Vec::new(),
            grid: Vec::new(),
            limits: Vec::new(),
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: ExperimentConfig,
    /// Files written, relative to the manifest's directory.
    pub outputs: Vec<String>,
}

/// Failure classes, each with its own exit status.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Divergence(String),
    Infeasible(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Infeasible(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Divergence(m) => write!(f, "diverged: {m}"),
            CliError::Infeasible(m) => write!(f, "infeasible: {m}"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidArgument(_)
            | Error::InvalidModel(_)
            | Error::UnknownTask(_)
            | Error::BlockedGrid
            | Error::Json(_) => CliError::Config(msg),
            Error::Divergence { .. } => CliError::Divergence(msg),
            Error::Infeasible(_) => CliError::Infeasible(msg),
            _ => CliError::Other(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn with_context(context: &str) -> impl Fn(CliError) -> CliError + '_ {
    move |e| match e {
        CliError::Config(m) => CliError::Config(format!("{context}: {m}")),
        CliError::Divergence(m) => CliError::Divergence(format!("{context}: {m}")),
        CliError::Infeasible(m) => CliError::Infeasible(format!("{context}: {m}")),
        CliError::Other(m) => CliError::Other(format!("{context}: {m}")),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    // serde_json reports the offending key together with line and column.
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Loads the base document for `command` from `--config` or `--manifest`.
pub fn load_config(common: &CommonArgs, command: &str) -> CliResult<ExperimentConfig> {
    if let Some(path) = &common.manifest {
        let manifest: Manifest = read_json(path)?;
        if manifest.command != command {
            return Err(CliError::Config(format!(
                "{} records a `{}` run, not `{command}`",
                path.display(),
                manifest.command
            )));
        }
        return Ok(manifest.config);
    }
    match &common.config {
        Some(path) => read_json(path),
        None => Ok(ExperimentConfig::default()),
    }
}

fn apply_common(cfg: &mut ExperimentConfig, common: &CommonArgs) {
    let t = &mut cfg.train;
    if let Some(task) = &common.task {
        t.task = task.clone();
    }
    if let Some(mode) = common.mode {
        t.mode = mode.into();
    }
    if let Some(e) = common.epochs {
        t.epochs = e;
    }
    if let Some(s) = common.steps_per_epoch {
        t.steps_per_epoch = s;
    }
    if common.cost_limit.is_some() {
        t.cost_limit = common.cost_limit;
    }
}

fn apply_seeds(cfg: &mut ExperimentConfig, flag: Option<u64>, default: usize) {
    if let Some(n) = flag {
        cfg.seeds = (0..n).collect();
    } else if cfg.seeds.is_empty() {
        cfg.seeds = (0..default as u64).collect();
    }
}

fn options(common: &CommonArgs) -> HarnessOptions {
    let mut opts = HarnessOptions::default();
    if common.workers > 0 {
        opts.workers = common.workers;
    }
    opts
}

/// Resolves the output root: flag or environment, then config, then `runs`.
fn out_root(cli_out: &Option<PathBuf>, cfg: &mut ExperimentConfig) -> PathBuf {
    let root = cli_out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    cfg.out = Some(root.clone());
    root
}

fn write_runs(root: &Path, command: &str, task: &str, runs: &[KeyedRun]) -> CliResult<Vec<String>> {
    let mut outputs = Vec::with_capacity(runs.len());
    for run in runs {
        let path = run_csv_path(root, command, task, &run.key);
        write_run_csv(&path, &run.record)?;
        outputs.push(format!("{}.csv", run.key));
    }
    Ok(outputs)
}

fn write_manifest(dir: &Path, command: &str, cfg: &ExperimentConfig, outputs: Vec<String>) -> CliResult<PathBuf> {
    let manifest = Manifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        outputs,
    };
    fs::create_dir_all(dir)?;
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Other(e.to_string()))?;
    fs::write(&path, text + "\n")?;
    Ok(path)
}

fn report_failures(failures: &[RunFailure], out: &mut dyn Write) -> CliResult<()> {
    for f in failures {
        writeln!(out, "warning: run {} failed: {}", f.key, f.error)?;
    }
    Ok(())
}

fn check_divergence(runs: &[KeyedRun]) -> CliResult<()> {
    match runs.iter().find_map(|r| r.record.diverged_at.map(|e| (&r.key, e))) {
        Some((key, epoch)) => Err(CliError::Divergence(format!("run {key} aborted at epoch {epoch}"))),
        None => Ok(()),
    }
}

pub fn cmd_tasks(out: &mut dyn Write) -> CliResult<()> {
    writeln!(out, "{:<20} {:>4} {:>7} {:>8} {:>12}  description", "name", "rank", "states", "actions", "cost_limit")?;
    for t in registry() {
        let m = &t.model;
        writeln!(
            out,
            "{:<20} {:>4} {:>7} {:>8} {:>12.6}  {}",
            t.name,
            t.difficulty_rank,
            m.n_states,
            m.n_actions,
            m.cost_limits.first().copied().unwrap_or(f64::INFINITY),
            t.description
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct OracleOutput {
    task: String,
    cost_limit: Vec<f64>,
    optimal_return: f64,
    optimal_cost: Vec<f64>,
    lambda_star: Vec<f64>,
    constraint_active: Vec<bool>,
    kkt_residual: f64,
    lambda_star_bisection: Option<f64>,
    lambda_star_interval: Option<(f64, f64)>,
    degenerate: Option<bool>,
    policy: Vec<Vec<f64>>,
}

pub fn cmd_oracle(args: &OracleArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = TrainConfig {
        task: args.task.clone(),
        cost_limit: args.cost_limit,
        ..TrainConfig::default()
    };
    let model = cfg.resolve_model()?;
    let sol = solve_lp(&model).map_err(CliError::from).map_err(with_context(&args.task))?;
    // The bisection cross-check is only defined for a single constraint.
    let report = if model.n_constraints() == 1 {
        lambda_star_report(&model, 1e-9).ok()
    } else {
        None
    };
    let policy = (0..model.n_states)
        .map(|s| (0..model.n_actions).map(|a| sol.policy.prob(s, a)).collect())
        .collect();
    let doc = OracleOutput {
        task: args.task.clone(),
        cost_limit: model.cost_limits.clone(),
        optimal_return: sol.optimal_return,
        optimal_cost: sol.optimal_cost,
        lambda_star: sol.lambda_star,
        constraint_active: sol.constraint_active,
        kkt_residual: sol.kkt_residual,
        lambda_star_bisection: report.as_ref().map(|r| r.bisection),
        lambda_star_interval: report.as_ref().map(|r| r.interval),
        degenerate: report.as_ref().map(|r| r.degenerate),
        policy,
    };
    let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Other(e.to_string()))?;
    writeln!(out, "{text}")?;
    Ok(())
}

pub fn cmd_train(args: &TrainArgs, cli_out: &Option<PathBuf>, out: &mut dyn Write) -> CliResult<()> {
    let mut cfg = load_config(&args.common, "train")?;
    apply_common(&mut cfg, &args.common);
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(c) = args.controller {
        cfg.train.controller.kind = c.into();
    }
    if let Some(l) = args.lambda {
        cfg.train.controller.fixed_lambda = l;
    }
    cfg.train.validate()?;
    let root = out_root(cli_out, &mut cfg);
    let task = cfg.train.task.clone();
    let record = train(&cfg.train).map_err(CliError::from).map_err(with_context(&task))?;
    let run = KeyedRun {
        key: format!("seed-{}", cfg.train.seed),
        record,
    };
    let mut outputs = write_runs(&root, "train", &task, std::slice::from_ref(&run))?;
    let dir = root.join("train").join(&task);
    // The single run's series doubles as the experiment aggregate.
    write_run_csv(&dir.join(AGGREGATE_FILE), &run.record)?;
    outputs.push(AGGREGATE_FILE.to_string());
    let manifest = write_manifest(&dir, "train", &cfg, outputs)?;
    if let Some(last) = run.record.metrics.last() {
        writeln!(
            out,
            "{task} seed {}: epoch {} return {:.6} cost {:?} lambda {:?}",
            cfg.train.seed, last.epoch, last.return_mean, last.cost_mean, last.lambda
        )?;
    }
    writeln!(out, "manifest: {}", manifest.display())?;
    check_divergence(std::slice::from_ref(&run))
}

pub fn cmd_profile(args: &ProfileArgs, cli_out: &Option<PathBuf>, out: &mut dyn Write) -> CliResult<()> {
    let mut cfg = load_config(&args.common, "profile")?;
    apply_common(&mut cfg, &args.common);
    apply_seeds(&mut cfg, args.seeds, DEFAULT_PROFILE_SEEDS);
    if let Some(g) = &args.grid {
        cfg.grid = g.clone();
    }
    let task = cfg.train.task.clone();
    if cfg.grid.is_empty() {
        cfg.grid = reference_lambda_grid(&task)
            .ok_or_else(|| CliError::Config(format!("no reference grid for `{task}`; pass --grid")))?;
    }
    let root = out_root(cli_out, &mut cfg);
    let outcome = run_lambda_profile(&task, &cfg.grid, &cfg.seeds, &cfg.train, &options(&args.common))
        .map_err(CliError::from)
        .map_err(with_context(&task))?;
    report_failures(&outcome.failures, out)?;
    let dir = root.join("profile").join(&task);
    let mut outputs = write_runs(&root, "profile", &task, &outcome.runs)?;
    write_profile_csv(&dir.join(AGGREGATE_FILE), &outcome.profile)?;
    outputs.push(AGGREGATE_FILE.to_string());
    let manifest = write_manifest(&dir, "profile", &cfg, outputs)?;
    writeln!(out, "{:>10} {:>12} {:>12}", "lambda", "return", "cost")?;
    for p in &outcome.profile.points {
        writeln!(out, "{:>10} {:>12.6} {:>12.6}", p.lambda_fixed, p.return_tail, p.cost_tail)?;
    }
    match &outcome.profile.lambda_star_estimate {
        Some(e) if e.inactive => writeln!(out, "constraint inactive on this grid: lambda* = 0")?,
        Some(e) => writeln!(out, "lambda* estimate: {:.6}", e.lambda)?,
        None => writeln!(out, "lambda* estimate: none (cost never crosses the limit on this grid)")?,
    }
    writeln!(out, "manifest: {}", manifest.display())?;
    Ok(())
}

pub fn cmd_sweep(args: &SweepArgs, cli_out: &Option<PathBuf>, out: &mut dyn Write) -> CliResult<()> {
    let mut cfg = load_config(&args.common, "sweep")?;
    apply_common(&mut cfg, &args.common);
    apply_seeds(&mut cfg, args.seeds, DEFAULT_PROFILE_SEEDS);
    if let Some(l) = &args.limits {
        cfg.limits = l.clone();
    }
    if let Some(c) = args.controller {
        cfg.train.controller.kind = c.into();
    }
    if cfg.limits.is_empty() {
        return Err(CliError::Config("sweep needs --limits or `limits` in the config".into()));
    }
    let task = cfg.train.task.clone();
    let root = out_root(cli_out, &mut cfg);
    let outcome = run_cost_limit_sweep(
        &task,
        &cfg.limits,
        &cfg.train.controller,
        &cfg.seeds,
        &cfg.train,
        &options(&args.common),
    )
    .map_err(CliError::from)
    .map_err(with_context(&task))?;
    report_failures(&outcome.failures, out)?;
    let dir = root.join("sweep").join(&task);
    let mut outputs = write_runs(&root, "sweep", &task, &outcome.runs)?;
    write_sweep_csv(&dir.join(AGGREGATE_FILE), &outcome.points)?;
    outputs.push(AGGREGATE_FILE.to_string());
    let manifest = write_manifest(&dir, "sweep", &cfg, outputs)?;
    writeln!(out, "{:>10} {:>12} {:>12}", "limit", "return", "cost")?;
    for p in &outcome.points {
        writeln!(out, "{:>10} {:>12.6} {:>12.6}", p.limit, p.return_tail, p.cost_tail)?;
    }
    writeln!(out, "manifest: {}", manifest.display())?;
    Ok(())
}

fn cell(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

pub fn cmd_compare(args: &CompareArgs, cli_out: &Option<PathBuf>, out: &mut dyn Write) -> CliResult<()> {
    let mut cfg = load_config(&args.common, "compare")?;
    apply_common(&mut cfg, &args.common);
    apply_seeds(&mut cfg, args.seeds, DEFAULT_STABILITY_SEEDS);
    cfg.train.controller.kind = ControllerKind::Ga;
    let task = cfg.train.task.clone();
    let root = out_root(cli_out, &mut cfg);
    let pid = TrainConfig {
        controller: cfg.pid.clone(),
        ..cfg.train.clone()
    };
    let report = run_stability_compare(&task, &cfg.train, &pid, &cfg.seeds, cfg.train.epochs, &options(&args.common))
        .map_err(CliError::from)
        .map_err(with_context(&task))?;
    let dir = root.join("compare").join(&task);
    let mut outputs = write_runs(&root, "compare", &task, &report.runs)?;
    write_stability_csv(&dir.join(AGGREGATE_FILE), &report)?;
    outputs.push(AGGREGATE_FILE.to_string());
    let manifest = write_manifest(&dir, "compare", &cfg, outputs)?;
    writeln!(out, "{task} (limit {:.4}, {} epochs)", report.cost_limit, report.epochs)?;
    writeln!(out, "{:<6} {:>12} {:>15} {:>12}", "method", "best_return", "violation_rate", "lambda_std")?;
    for s in [&report.ga, &report.pid] {
        writeln!(
            out,
            "{:<6} {:>12} {:>15} {:>12.6}",
            s.method,
            cell(s.best_return),
            cell(s.violation_rate),
            s.lambda_std
        )?;
    }
    writeln!(out, "manifest: {}", manifest.display())?;
    check_divergence(&report.runs)
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> CliResult<()> {
    match &cli.command {
        Command::Tasks => cmd_tasks(out),
        Command::Oracle(a) => cmd_oracle(a, out),
        Command::Train(a) => cmd_train(a, &cli.out, out),
        Command::Profile(a) => cmd_profile(a, &cli.out, out),
        Command::Sweep(a) => cmd_sweep(a, &cli.out, out),
        Command::Compare(a) => cmd_compare(a, &cli.out, out),
    }
}
