use lagrangelab::envs::task_by_name;
use lagrangelab::harness::{
    run_cost_limit_sweep, run_csv_path, run_lambda_profile, write_run_csv, HarnessOptions,
};
use lagrangelab::oracle::solve_lp;
use lagrangelab::{ControllerConfig, TrainConfig, TrainMode};

fn exact(epochs: usize) -> TrainConfig {
    TrainConfig {
        mode: TrainMode::ExactDual,
        epochs,
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
fn json_config_drives_a_sampled_run_to_csv() {
    let cfg: TrainConfig = serde_json::from_str(
        r#"{"task": "grid-hazard-small", "epochs": 12, "steps_per_epoch": 1000, "seed": 3}"#,
    )
    .unwrap();
    let rec = lagrangelab::trainer::train(&cfg).unwrap();
    assert_eq!(rec.metrics.len(), 12);
    assert!(rec.diverged_at.is_none());
    // The uniform start policy wanders through hazards, so the multiplier climbs.
    assert!(rec.lambdas().last().unwrap() > &cfg.controller.lambda_init);

    let tmp = tempfile::tempdir().unwrap();
    let path = run_csv_path(tmp.path(), "train", &cfg.task, "seed-3");
    write_run_csv(&path, &rec).unwrap();
    let mut reader = csv::Reader::from_path(&path).unwrap();
    assert_eq!(reader.headers().unwrap().get(0), Some("epoch"));
    assert_eq!(reader.records().count(), 12);
}

// Tail averages of the dual iterates mix policies along the frontier, so
// they can never beat the LP optimum at the cost they actually spend.
#[test]
fn exact_sweep_stays_under_the_lp_frontier() {
    let task = "grid-two-goal";
    let d = task_by_name(task).unwrap().model.cost_limits[0];
    let limits = [0.5 * d, d, 1.5 * d];
    let out = run_cost_limit_sweep(task, &limits, &ControllerConfig::ga(0.035), &[0], &exact(600), &opts())
        .unwrap();
    assert!(out.failures.is_empty());
    let model = task_by_name(task).unwrap().model;
    let mut previous = f64::NEG_INFINITY;
    for p in &out.points {
        let frontier = solve_lp(&model.with_cost_limits(vec![p.cost_tail.max(1e-12)])).unwrap();
        assert!(p.return_tail <= frontier.optimal_return + 1e-6, "{p:?} vs {}", frontier.optimal_return);
        assert!((p.cost_tail - p.limit).abs() <= 0.05 * p.limit, "{p:?}");
        assert!(p.return_tail >= previous - 1e-9, "{p:?}");
        previous = p.return_tail;
    }
}

#[test]
fn exact_profile_brackets_the_oracle_multiplier() {
    let task = "grid-hazard-dense";
    let star = solve_lp(&task_by_name(task).unwrap().model).unwrap().lambda_star[0];
    let grid: Vec<f64> = (0..=12).map(|k| 0.5 * k as f64).collect();
    let out = run_lambda_profile(task, &grid, &[0], &exact(3), &opts()).unwrap();
    let est = out.profile.lambda_star_estimate.expect("profile crosses the limit");
    assert!((est.lambda - star).abs() <= 0.5, "{} vs {star}", est.lambda);
}
