//! Experiment drivers: fixed-multiplier profiles, cost-limit sweeps and
//! GA-vs-PID stability comparisons, plus their summary metrics and CSV output.
//!
//! Runs inside an experiment execute on a bounded rayon pool. Results are
//! collected in input order, so aggregates never depend on scheduling.

mod io;
mod metrics;

use rayon::prelude::*;
use serde::Serialize;

pub use io::{
    run_csv_path, write_profile_csv, write_run_csv, write_stability_csv, write_sweep_csv,
};
pub use metrics::{
    best_return_under_constraint, interpolate_crossing, mean_std, smooth, tail_average,
    violation_rate_after_first_satisfaction, LambdaStarEstimate,
};
pub use crate::trainer::RunRecord;

use crate::error::{Error, Result};
use crate::multiplier::{ControllerConfig, ControllerKind};
use crate::trainer::{train, TrainConfig};

/// Tail fraction used for profile and sweep summaries.
pub const DEFAULT_TAIL_FRACTION: f64 = 0.05;
/// Oscillation statistics use the last half of training.
pub const STABILITY_TAIL_FRACTION: f64 = 0.5;
pub const DEFAULT_PROFILE_SEEDS: usize = 10;
pub const DEFAULT_STABILITY_SEEDS: usize = 6;
pub const DEFAULT_SMOOTHING: f64 = 0.9;

/// Multiplier grids from the reference study, keyed by the builtin task
/// standing in for each original environment.
pub fn reference_lambda_grid(task: &str) -> Option<Vec<f64>> {
    let grid: &[f64] = match task {
        "chain-speed" => &[
            0.0, 0.03, 0.05, 0.07, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6, 0.7,
            1.0, 1.15, 1.3, 1.4, 1.5, 1.6, 1.7, 1.9, 2.0,
        ],
        "grid-hazard-small" => &[
            0.0, 0.03, 0.1, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.3, 4.5, 4.7, 5.0, 5.3, 5.5,
            5.7, 6.0, 6.3, 6.5, 6.7, 7.0, 7.3, 7.5,
        ],
        "grid-hazard-dense" => &[
            0.0, 0.03, 0.1, 0.3, 0.5, 0.7, 1.0, 1.3, 1.5, 1.7, 2.0, 2.5, 2.7, 3.0, 3.3, 3.5, 4.0,
            4.5, 5.0, 5.5, 6.0, 6.5, 7.0, 7.5, 8.0,
        ],
        "grid-two-goal" => &[
            0.0, 0.01, 0.05, 0.1, 0.15, 0.3, 0.4, 0.45, 0.5, 0.55, 0.6, 0.7, 0.8, 0.9, 1.0, 1.15,
            1.3, 1.4, 1.5, 1.7, 1.9, 2.0, 2.3, 2.5, 3.0,
        ],
        _ => return None,
    };
    Some(grid.to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HarnessOptions {
    pub workers: usize,
    pub tail_fraction: f64,
}

impl Default for HarnessOptions {
    fn default() -> Self {
        Self {
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            tail_fraction: DEFAULT_TAIL_FRACTION,
        }
    }
}

/// A completed run with the file-name key it is emitted under.
#[derive(Debug, Clone, Serialize)]
pub struct KeyedRun {
    pub key: String,
    pub record: RunRecord,
}

/// A run that failed; profiles and sweeps mark its point absent.
#[derive(Debug, Clone, Serialize)]
pub struct RunFailure {
    pub key: String,
    pub error: String,
}

fn run_all(jobs: Vec<(String, TrainConfig)>, workers: usize) -> Result<Vec<(String, Result<RunRecord>)>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    Ok(pool.install(|| {
        jobs.into_par_iter()
            .map(|(key, cfg)| {
                let out = train(&cfg);
                (key, out)
            })
            .collect()
    }))
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed is required".into()));
    }
    Ok(())
}

fn summarize(records: &[&RunRecord], fraction: f64) -> Option<(f64, f64, f64, f64, usize)> {
    let rets: Vec<f64> = records
        .iter()
        .filter_map(|r| tail_average(&r.returns(), fraction))
        .collect();
    let costs: Vec<f64> = records
        .iter()
        .filter_map(|r| tail_average(&r.costs(), fraction))
        .collect();
    if rets.is_empty() {
        return None;
    }
    let (rm, rs) = mean_std(&rets);
    let (cm, cs) = mean_std(&costs);
    Some((rm, rs, cm, cs, rets.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfilePoint {
    pub lambda_fixed: f64,
    pub return_tail: f64,
    pub cost_tail: f64,
    pub return_std: f64,
    pub cost_std: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct LambdaProfile {
    pub task: String,
    pub cost_limit: f64,
    pub points: Vec<ProfilePoint>,
    pub lambda_star_estimate: Option<LambdaStarEstimate>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProfileOutcome {
    pub profile: LambdaProfile,
    pub runs: Vec<KeyedRun>,
    pub failures: Vec<RunFailure>,
}

/// Reads `lambda*` off a profile as the first downward crossing of the tail
/// cost through the limit.
pub fn find_lambda_star(profile: &LambdaProfile) -> Result<LambdaStarEstimate> {
    let pts: Vec<(f64, f64)> = profile
        .points
        .iter()
        .map(|p| (p.lambda_fixed, p.cost_tail))
        .collect();
    interpolate_crossing(&pts, profile.cost_limit)
}

fn fmt_key(x: f64) -> String {
    format!("{x}")
}

/// One fixed-multiplier run per `(lambda, seed)`; tail averages per lambda.
pub fn run_lambda_profile(
    task: &str,
    grid: &[f64],
    seeds: &[u64],
    base: &TrainConfig,
    opts: &HarnessOptions,
) -> Result<ProfileOutcome> {
    check_seeds(seeds)?;
    if grid.is_empty() {
        return Err(Error::InvalidArgument("lambda grid is empty".into()));
    }
    let mut grid = grid.to_vec();
    if grid.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
        return Err(Error::InvalidArgument("lambda grid values must be finite and >= 0".into()));
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let base = TrainConfig {
        task: task.to_string(),
        ..base.clone()
    };
    let model = base.resolve_model()?;
    let limit = model.cost_limits.first().copied().unwrap_or(f64::INFINITY);

    let mut jobs = Vec::new();
    for &lambda in &grid {
        for &seed in seeds {
            let mut controller = base.controller.clone();
            controller.kind = ControllerKind::Fixed;
            controller.fixed_lambda = lambda;
            let cfg = TrainConfig {
                controller,
                seed,
                ..base.clone()
            };
            jobs.push((format!("lambda-{}_seed-{seed}", fmt_key(lambda)), cfg));
        }
    }
    let results = run_all(jobs, opts.workers)?;

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    let mut points = Vec::new();
    for (gi, &lambda) in grid.iter().enumerate() {
        let mut ok = Vec::new();
        for (key, res) in &results[gi * seeds.len()..(gi + 1) * seeds.len()] {
            match res {
                Ok(r) if r.diverged_at.is_none() => ok.push(KeyedRun {
                    key: key.clone(),
                    record: r.clone(),
                }),
                Ok(r) => failures.push(RunFailure {
                    key: key.clone(),
                    error: format!("diverged at epoch {}", r.diverged_at.unwrap_or(0)),
                }),
                Err(e) => failures.push(RunFailure {
                    key: key.clone(),
                    error: e.to_string(),
                }),
            }
        }
        let recs: Vec<&RunRecord> = ok.iter().map(|k| &k.record).collect();
        if let Some((rm, rs, cm, cs, n)) = summarize(&recs, opts.tail_fraction) {
            points.push(ProfilePoint {
                lambda_fixed: lambda,
                return_tail: rm,
                cost_tail: cm,
                return_std: rs,
                cost_std: cs,
                n_seeds: n,
            });
        }
        runs.extend(ok);
    }
    let mut profile = LambdaProfile {
        task: task.to_string(),
        cost_limit: limit,
        points,
        lambda_star_estimate: None,
    };
    profile.lambda_star_estimate = find_lambda_star(&profile).ok();
    Ok(ProfileOutcome {
        profile,
        runs,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub limit: f64,
    pub return_tail: f64,
    pub cost_tail: f64,
    pub return_std: f64,
    pub cost_std: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepOutcome {
    pub task: String,
    pub points: Vec<SweepPoint>,
    pub runs: Vec<KeyedRun>,
    pub failures: Vec<RunFailure>,
}

/// One run per `(limit, seed)` with the given controller, tail-averaged.
pub fn run_cost_limit_sweep(
    task: &str,
    limits: &[f64],
    controller: &ControllerConfig,
    seeds: &[u64],
    base: &TrainConfig,
    opts: &HarnessOptions,
) -> Result<SweepOutcome> {
    check_seeds(seeds)?;
    if limits.is_empty() || limits.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
        return Err(Error::InvalidArgument("limits must be non-empty, finite and positive".into()));
    }
    let mut jobs = Vec::new();
    for &limit in limits {
        for &seed in seeds {
            let cfg = TrainConfig {
                task: task.to_string(),
                controller: controller.clone(),
                cost_limit: Some(limit),
                seed,
                ..base.clone()
            };
            jobs.push((format!("limit-{}_seed-{seed}", fmt_key(limit)), cfg));
        }
    }
    let results = run_all(jobs, opts.workers)?;
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    let mut points = Vec::new();
    for (li, &limit) in limits.iter().enumerate() {
        let mut ok = Vec::new();
        for (key, res) in &results[li * seeds.len()..(li + 1) * seeds.len()] {
            match res {
                Ok(r) if r.diverged_at.is_none() => ok.push(KeyedRun {
                    key: key.clone(),
                    record: r.clone(),
                }),
                Ok(r) => failures.push(RunFailure {
                    key: key.clone(),
                    error: format!("diverged at epoch {}", r.diverged_at.unwrap_or(0)),
                }),
                Err(e) => failures.push(RunFailure {
                    key: key.clone(),
                    error: e.to_string(),
                }),
            }
        }
        let recs: Vec<&RunRecord> = ok.iter().map(|k| &k.record).collect();
        if let Some((rm, rs, cm, cs, n)) = summarize(&recs, opts.tail_fraction) {
            points.push(SweepPoint {
                limit,
                return_tail: rm,
                cost_tail: cm,
                return_std: rs,
                cost_std: cs,
                n_seeds: n,
            });
        }
        runs.extend(ok);
    }
    Ok(SweepOutcome {
        task: task.to_string(),
        points,
        runs,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub best_epoch: Option<usize>,
    pub best_return: Option<f64>,
    pub violation_rate: Option<f64>,
    pub lambda_std: f64,
}

/// Table-1 style metrics for one method. `best_*` and `violation_rate` are
/// computed on the seed-averaged curves; `lambda_std` is the per-seed
/// multiplier standard deviation over the last half of training, averaged.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub best_epoch: Option<usize>,
    pub best_return: Option<f64>,
    pub violation_rate: Option<f64>,
    pub lambda_std: f64,
    pub per_seed: Vec<SeedSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    pub task: String,
    pub cost_limit: f64,
    pub epochs: usize,
    pub ga: MethodSummary,
    pub pid: MethodSummary,
    #[serde(skip)]
    pub runs: Vec<KeyedRun>,
}

fn lambda_tail_std(record: &RunRecord) -> f64 {
    let l = record.lambdas();
    if l.is_empty() {
        return 0.0;
    }
    let k = ((STABILITY_TAIL_FRACTION * l.len() as f64).ceil() as usize).clamp(1, l.len());
    let tail = &l[l.len() - k..];
    let mean = tail.iter().sum::<f64>() / k as f64;
    (tail.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / k as f64).sqrt()
}

fn mean_curve(records: &[&RunRecord], f: impl Fn(&RunRecord) -> Vec<f64>) -> Vec<f64> {
    let curves: Vec<Vec<f64>> = records.iter().map(|r| f(r)).collect();
    let len = curves.iter().map(Vec::len).min().unwrap_or(0);
    (0..len)
        .map(|k| curves.iter().map(|c| c[k]).sum::<f64>() / curves.len() as f64)
        .collect()
}

fn method_summary(method: &str, records: &[(u64, &RunRecord)], limit: f64) -> MethodSummary {
    let per_seed: Vec<SeedSummary> = records
        .iter()
        .map(|(seed, r)| {
            let best = best_return_under_constraint(&r.returns(), &r.costs(), limit);
            SeedSummary {
                seed: *seed,
                best_epoch: best.map(|b| b.0),
                best_return: best.map(|b| b.1),
                violation_rate: violation_rate_after_first_satisfaction(&r.costs(), limit),
                lambda_std: lambda_tail_std(r),
            }
        })
        .collect();
    let recs: Vec<&RunRecord> = records.iter().map(|(_, r)| *r).collect();
    let returns = mean_curve(&recs, RunRecord::returns);
    let costs = mean_curve(&recs, RunRecord::costs);
    let best = best_return_under_constraint(&returns, &costs, limit);
    let lambda_std = if per_seed.is_empty() {
        0.0
    } else {
        per_seed.iter().map(|s| s.lambda_std).sum::<f64>() / per_seed.len() as f64
    };
    MethodSummary {
        method: method.to_string(),
        best_epoch: best.map(|b| b.0),
        best_return: best.map(|b| b.1),
        violation_rate: violation_rate_after_first_satisfaction(&costs, limit),
        lambda_std,
        per_seed,
    }
}

/// Runs both controllers on the same seeds for `epochs` epochs and reports
/// best return under the constraint, violation rate and multiplier spread.
pub fn run_stability_compare(
    task: &str,
    ga: &TrainConfig,
    pid: &TrainConfig,
    seeds: &[u64],
    epochs: usize,
    opts: &HarnessOptions,
) -> Result<StabilityReport> {
    check_seeds(seeds)?;
    ga.validate()?;
    pid.validate()?;
    let mut jobs = Vec::new();
    for (method, cfg) in [("ga", ga), ("pid", pid)] {
        for &seed in seeds {
            let c = TrainConfig {
                task: task.to_string(),
                epochs,
                seed,
                ..cfg.clone()
            };
            jobs.push((format!("{method}_seed-{seed}"), c));
        }
    }
    let limit = TrainConfig {
        task: task.to_string(),
        ..ga.clone()
    }
    .resolve_model()?
    .cost_limits
    .first()
    .copied()
    .unwrap_or(f64::INFINITY);
    let results = run_all(jobs, opts.workers)?;
    let mut runs = Vec::with_capacity(results.len());
    for (key, res) in results {
        let record = res.map_err(|e| Error::InvalidArgument(format!("run {key} failed: {e}")))?;
        runs.push(KeyedRun { key, record });
    }
    let n = seeds.len();
    let ga_recs: Vec<(u64, &RunRecord)> = seeds.iter().copied().zip(runs[..n].iter().map(|k| &k.record)).collect();
    let pid_recs: Vec<(u64, &RunRecord)> = seeds.iter().copied().zip(runs[n..].iter().map(|k| &k.record)).collect();
    let ga_summary = method_summary("ga", &ga_recs, limit);
    let pid_summary = method_summary("pid", &pid_recs, limit);
    Ok(StabilityReport {
        task: task.to_string(),
        cost_limit: limit,
        epochs,
        ga: ga_summary,
        pid: pid_summary,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::lambda_star_bisection;
    use crate::trainer::TrainMode;

    fn exact(epochs: usize) -> TrainConfig {
        TrainConfig {
            mode: TrainMode::ExactDual,
            epochs,
            exact_tol: 1e-10,
            ..TrainConfig::default()
        }
    }

    fn opts() -> HarnessOptions {
        HarnessOptions {
            workers: 2,
            ..HarnessOptions::default()
        }
    }

    #[test]
    fn reference_grids_start_at_zero_and_are_sorted() {
        for task in crate::envs::registry() {
            let g = reference_lambda_grid(&task.name).unwrap();
            assert_eq!(g.len(), 25);
            assert_eq!(g[0], 0.0);
            assert!(g.windows(2).all(|w| w[0] < w[1]));
        }
        assert!(reference_lambda_grid("missing").is_none());
    }

    #[test]
    fn zero_only_grid_is_unconstrained_performance() {
        let out = run_lambda_profile("chain-speed", &[0.0], &[0], &exact(3), &opts()).unwrap();
        assert_eq!(out.profile.points.len(), 1);
        let model = crate::envs::task_by_name("chain-speed").unwrap().model;
        let (v, _) = crate::dp::value_iteration(&model, &model.reward, 1e-10);
        let best = crate::model::start_value(&model, &v.v);
        assert!((out.profile.points[0].return_tail - best).abs() < 1e-8);
    }

    #[test]
    fn exact_profile_costs_are_monotone_and_locate_lambda_star() {
        let grid: Vec<f64> = (0..8).map(|k| k as f64 * 0.25).collect();
        let out = run_lambda_profile("chain-speed", &grid, &[0, 1], &exact(2), &opts()).unwrap();
        let costs: Vec<f64> = out.profile.points.iter().map(|p| p.cost_tail).collect();
        assert!(costs.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        let est = find_lambda_star(&out.profile).unwrap();
        let model = crate::envs::task_by_name("chain-speed").unwrap().model;
        let oracle = lambda_star_bisection(&model, 100.0, 1e-8).unwrap();
        assert!((est.lambda - oracle).abs() <= 0.25 + 1e-9, "{} vs {oracle}", est.lambda);
    }

    #[test]
    fn finer_grid_estimate_is_no_worse() {
        let model = crate::envs::task_by_name("grid-hazard-small").unwrap().model;
        let oracle = lambda_star_bisection(&model, 100.0, 1e-9).unwrap();
        let coarse: Vec<f64> = (0..=16).map(|k| k as f64 * 0.5).collect();
        let fine: Vec<f64> = (0..=64).map(|k| k as f64 * 0.125).collect();
        let est = |g: &[f64]| {
            let out = run_lambda_profile("grid-hazard-small", g, &[0], &exact(1), &opts()).unwrap();
            find_lambda_star(&out.profile).unwrap().lambda
        };
        assert!((est(&fine) - oracle).abs() <= (est(&coarse) - oracle).abs() + 1e-12);
    }

    #[test]
    fn profiles_are_deterministic_across_worker_counts() {
        let cfg = TrainConfig {
            epochs: 3,
            steps_per_epoch: 2000,
            ..TrainConfig::default()
        };
        let a = run_lambda_profile("chain-speed", &[0.0, 1.0], &[0, 1], &cfg, &HarnessOptions { workers: 1, ..opts() }).unwrap();
        let b = run_lambda_profile("chain-speed", &[1.0, 0.0], &[0, 1], &cfg, &HarnessOptions { workers: 4, ..opts() }).unwrap();
        assert_eq!(a.profile.points, b.profile.points);
    }

    #[test]
    fn invalid_profile_inputs_are_rejected() {
        assert!(run_lambda_profile("chain-speed", &[], &[0], &exact(1), &opts()).is_err());
        assert!(run_lambda_profile("chain-speed", &[-1.0], &[0], &exact(1), &opts()).is_err());
        assert!(run_lambda_profile("chain-speed", &[0.0], &[], &exact(1), &opts()).is_err());
    }

    #[test]
    fn exact_sweep_cost_increases_with_limit() {
        let model = crate::envs::task_by_name("grid-hazard-small").unwrap().model;
        let d = model.cost_limits[0];
        let limits = [0.5 * d, d, 1.5 * d, 2.0 * d];
        let cfg = exact(400);
        let out = run_cost_limit_sweep("grid-hazard-small", &limits, &ControllerConfig::default(), &[0], &cfg, &opts()).unwrap();
        assert_eq!(out.points.len(), 4);
        let costs: Vec<f64> = out.points.iter().map(|p| p.cost_tail).collect();
        assert!(costs.windows(2).all(|w| w[1] >= w[0] - 1e-9), "{costs:?}");
    }

    #[test]
    fn slack_limit_sweep_recovers_unconstrained_return() {
        let model = crate::envs::task_by_name("chain-speed").unwrap().model;
        let unconstrained = crate::envs::unconstrained_cost(&model, 0).unwrap();
        let (v, _) = crate::dp::value_iteration(&model, &model.reward, 1e-10);
        let best = crate::model::start_value(&model, &v.v);
        let out = run_cost_limit_sweep("chain-speed", &[unconstrained * 2.0], &ControllerConfig::default(), &[0], &exact(50), &opts()).unwrap();
        assert!((out.points[0].return_tail - best).abs() < 1e-8);
    }

    #[test]
    fn identical_configs_give_identical_columns() {
        let cfg = TrainConfig {
            epochs: 4,
            steps_per_epoch: 2000,
            ..TrainConfig::default()
        };
        let rep = run_stability_compare("chain-speed", &cfg, &cfg, &[0, 1], 4, &opts()).unwrap();
        assert_eq!(rep.ga.best_return, rep.pid.best_return);
        assert_eq!(rep.ga.violation_rate, rep.pid.violation_rate);
        assert_eq!(rep.ga.lambda_std, rep.pid.lambda_std);
        assert_eq!(rep.runs.len(), 4);
    }
}
