//! CSV emission. Layout: `<root>/<experiment>/<task>/<run-key>.csv` for raw
//! runs and `<root>/<experiment>/<task>/aggregate.csv` for summaries. Raw
//! series are never smoothed.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::trainer::RunRecord;

use super::{LambdaProfile, StabilityReport, SweepPoint};

pub fn run_csv_path(root: &Path, experiment: &str, task: &str, key: &str) -> PathBuf {
    root.join(experiment).join(task).join(format!("{key}.csv"))
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(csv::Writer::from_path(path)?)
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

/// Per-epoch series: `epoch, steps, return, cost_i.., lambda_i.., xi_i.., kl, inner_iters`.
pub fn write_run_csv(path: &Path, record: &RunRecord) -> Result<()> {
    let m = record.metrics.first().map_or(0, |e| e.cost_mean.len());
    let mut w = writer(path)?;
    let mut header = vec!["epoch".to_string(), "steps".into(), "return".into()];
    for prefix in ["cost", "lambda", "xi"] {
        header.extend((0..m).map(|i| format!("{prefix}_{i}")));
    }
    header.extend(["kl".to_string(), "inner_iters".into()]);
    w.write_record(&header)?;
    for e in &record.metrics {
        let mut row = vec![e.epoch.to_string(), e.steps.to_string(), e.return_mean.to_string()];
        for series in [&e.cost_mean, &e.lambda, &e.xi] {
            row.extend(series.iter().map(f64::to_string));
        }
        row.extend([e.kl.to_string(), e.inner_iters_used.to_string()]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `lambda, return_tail, return_std, cost_tail, cost_std, n_seeds, cost_limit`.
pub fn write_profile_csv(path: &Path, profile: &LambdaProfile) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["lambda", "return_tail", "return_std", "cost_tail", "cost_std", "n_seeds", "cost_limit"])?;
    for p in &profile.points {
        w.write_record([
            p.lambda_fixed.to_string(),
            p.return_tail.to_string(),
            p.return_std.to_string(),
            p.cost_tail.to_string(),
            p.cost_std.to_string(),
            p.n_seeds.to_string(),
            profile.cost_limit.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `limit, return_tail, return_std, cost_tail, cost_std, n_seeds`.
pub fn write_sweep_csv(path: &Path, points: &[SweepPoint]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["limit", "return_tail", "return_std", "cost_tail", "cost_std", "n_seeds"])?;
    for p in points {
        w.write_record([
            p.limit.to_string(),
            p.return_tail.to_string(),
            p.return_std.to_string(),
            p.cost_tail.to_string(),
            p.cost_std.to_string(),
            p.n_seeds.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per method plus one per `(method, seed)`; `seed` is empty on the
/// method rows. Absent metrics are empty cells.
pub fn write_stability_csv(path: &Path, report: &StabilityReport) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["method", "seed", "best_epoch", "best_return", "violation_rate", "lambda_std"])?;
    for s in [&report.ga, &report.pid] {
        w.write_record([
            s.method.clone(),
            String::new(),
            s.best_epoch.map_or_else(String::new, |e| e.to_string()),
            opt(s.best_return),
            opt(s.violation_rate),
            s.lambda_std.to_string(),
        ])?;
    }
    for s in [&report.ga, &report.pid] {
        for p in &s.per_seed {
            w.write_record([
                s.method.clone(),
                p.seed.to_string(),
                p.best_epoch.map_or_else(String::new, |e| e.to_string()),
                opt(p.best_return),
                opt(p.violation_rate),
                p.lambda_std.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
