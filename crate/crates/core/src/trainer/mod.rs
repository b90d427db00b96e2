//! Two-timescale dual descent: a policy improvement step under the current
//! multiplier, alternating with a controller step on the measured penalty.

mod exact;
mod gae;
mod ppo;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use exact::{exact_dual_run, shaped_signal};
pub use gae::gae_advantages;
pub use ppo::{
    clipped_surrogate, clipped_surrogate_grad, mean_kl, ppo_lag_epoch, penalized_advantages,
    PolicyOptimizer, SoftmaxPolicy, SurrogateSample,
};

pub use crate::dp::value_iteration;
use crate::envs::task_by_name;
use crate::error::{Error, Result};
use crate::model::{CmdpModel, PolicyTable};
use crate::multiplier::{ControllerConfig, ControllerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Inner problem solved exactly by value iteration each epoch.
    ExactDual,
    /// Clipped-surrogate policy gradient on sampled trajectories.
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Which cost statistic is compared against the limit in sampled mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintSignal {
    /// Mean discounted cost from the start distribution (the LP's units).
    Discounted,
    /// Mean undiscounted cost per horizon-length episode.
    EpisodicMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: String,
    pub controller: ControllerConfig,
    pub mode: TrainMode,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub inner_iters: usize,
    pub clip_ratio: f64,
    pub gae_lambda: f64,
    pub gamma_r: f64,
    pub gamma_c: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub target_kl: f64,
    pub entropy_coef: f64,
    pub batch_size: usize,
    pub constraint_signal: ConstraintSignal,
    pub seed: u64,
    /// Replaces every task cost limit when set.
    pub cost_limit: Option<f64>,
    /// Value-iteration tolerance in exact-dual mode.
    pub exact_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: "chain-speed".to_string(),
            controller: ControllerConfig::default(),
            mode: TrainMode::Sampled,
            epochs: 100,
            steps_per_epoch: 20_000,
            inner_iters: 40,
            clip_ratio: 0.2,
            gae_lambda: 0.95,
            gamma_r: 0.99,
            gamma_c: 0.99,
            learning_rate: 0.05,
            optimizer: OptimizerKind::Sgd,
            target_kl: 0.02,
            entropy_coef: 0.0,
            batch_size: 64,
            constraint_signal: ConstraintSignal::Discounted,
            seed: 0,
            cost_limit: None,
            exact_tol: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return bad(format!("clip_ratio must lie in (0, 1), got {}", self.clip_ratio));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad(format!("gae_lambda must lie in [0, 1], got {}", self.gae_lambda));
        }
        for (name, g) in [("gamma_r", self.gamma_r), ("gamma_c", self.gamma_c)] {
            if !(0.0..1.0).contains(&g) {
                return bad(format!("{name} must lie in [0, 1), got {g}"));
            }
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return bad("batch_size and steps_per_epoch must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !(self.target_kl > 0.0) || !(self.exact_tol > 0.0) {
            return bad("learning_rate, target_kl and exact_tol must be positive".into());
        }
        if !(self.entropy_coef >= 0.0) {
            return bad(format!("entropy_coef must be non-negative, got {}", self.entropy_coef));
        }
        if let Some(d) = self.cost_limit {
            if !d.is_finite() {
                return bad(format!("cost_limit must be finite, got {d}"));
            }
        }
        self.controller.validate().map_err(Error::InvalidArgument)
    }

    /// The task model with any cost-limit override applied.
    pub fn resolve_model(&self) -> Result<CmdpModel> {
        let model = task_by_name(&self.task)?.model;
        Ok(self.apply_limit(model))
    }

    pub fn apply_limit(&self, model: CmdpModel) -> CmdpModel {
        match self.cost_limit {
            Some(d) => {
                let m = model.n_constraints();
                model.with_cost_limits(vec![d; m])
            }
            None => model,
        }
    }
}

/// Everything logged for one epoch. Vectors hold one entry per constraint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub return_mean: f64,
    pub cost_mean: Vec<f64>,
    /// Multiplier used for this epoch's policy update (read before the
    /// controller step).
    pub lambda: Vec<f64>,
    pub xi: Vec<f64>,
    pub kl: f64,
    pub inner_iters_used: usize,
}

impl EpochMetrics {
    pub fn cost(&self) -> f64 {
        self.cost_mean.first().copied().unwrap_or(0.0)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.first().copied().unwrap_or(0.0)
    }

    pub fn xi(&self) -> f64 {
        self.xi.first().copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub metrics: Vec<EpochMetrics>,
    pub wall_time: f64,
    /// Epoch at which the divergence guard aborted the run.
    pub diverged_at: Option<usize>,
    #[serde(skip)]
    pub final_policy: PolicyTable,
}

impl RunRecord {
    pub fn returns(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.return_mean).collect()
    }

    pub fn costs(&self) -> Vec<f64> {
        self.metrics.iter().map(EpochMetrics::cost).collect()
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.metrics.iter().map(EpochMetrics::lambda).collect()
    }
}

fn controllers_for(model: &CmdpModel, config: &ControllerConfig) -> Vec<ControllerState> {
    (0..model.n_constraints())
        .map(|_| ControllerState::new(config.clone()))
        .collect()
}

/// Runs the configured training loop on the named task.
pub fn train(config: &TrainConfig) -> Result<RunRecord> {
    let model = config.resolve_model()?;
    train_on(&model, config)
}

/// Runs the configured training loop on an explicit model. Deterministic in
/// `config.seed`.
pub fn train_on(model: &CmdpModel, config: &TrainConfig) -> Result<RunRecord> {
    config.validate()?;
    model.ensure_valid()?;
    let started = Instant::now();
    let mut record = match config.mode {
        TrainMode::ExactDual => exact::run(model, config)?,
        TrainMode::Sampled => run_sampled(model, config)?,
    };
    record.wall_time = started.elapsed().as_secs_f64();
    Ok(record)
}

fn run_sampled(model: &CmdpModel, config: &TrainConfig) -> Result<RunRecord> {
    let mut policy = SoftmaxPolicy::zeros(model.n_states, model.n_actions);
    let mut optimizer = PolicyOptimizer::new(config.optimizer, policy.logits.len());
    let mut controllers = controllers_for(model, &config.controller);
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut diverged_at = None;
    for epoch in 0..config.epochs {
        let seed = crate::sampling::derive_seed(config.seed, epoch as u64);
        match ppo_lag_epoch(model, &policy, &mut optimizer, &controllers, config, seed, epoch) {
            Ok((next_policy, next_controllers, m)) => {
                policy = next_policy;
                controllers = next_controllers;
                metrics.push(m);
            }
            Err(Error::Divergence { epoch }) => {
                diverged_at = Some(epoch);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(RunRecord {
        config: config.clone(),
        metrics,
        wall_time: 0.0,
        diverged_at,
        final_policy: policy.to_table(),
    })
}
