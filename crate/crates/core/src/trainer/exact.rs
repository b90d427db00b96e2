use crate::dp::value_iteration;
use crate::error::{Error, Result};
use crate::model::{evaluate, start_value, CmdpModel, Signal};
use crate::multiplier::{ControllerConfig, PenaltyObservation};

use super::{controllers_for, EpochMetrics, RunRecord, TrainConfig, TrainMode};

/// Reward side of the Lagrangian, `r - sum_i lambda_i c_i`, per transition.
///
/// The constant `lambda . d` is omitted since it does not move the argmax.
pub fn shaped_signal(model: &CmdpModel, lambda: &[f64]) -> Result<Vec<f64>> {
    if lambda.len() != model.n_constraints() {
        return Err(Error::InvalidArgument(format!(
            "{} multipliers for {} constraints",
            lambda.len(),
            model.n_constraints()
        )));
    }
    if let Some(l) = lambda.iter().find(|l| !(**l >= 0.0)) {
        return Err(Error::InvalidArgument(format!("negative multiplier {l}")));
    }
    let mut out = model.reward.clone();
    for (l, cost) in lambda.iter().zip(&model.costs) {
        if *l == 0.0 {
            continue;
        }
        for (o, c) in out.iter_mut().zip(cost) {
            *o -= l * c;
        }
    }
    Ok(out)
}

/// Exact dual descent: each epoch the Lagrangian-optimal policy for the
/// current multiplier is found by value iteration, its true return and
/// costs are evaluated, and the controller steps on `xi = J_C - d`.
pub fn exact_dual_run(
    model: &CmdpModel,
    controller: &ControllerConfig,
    epochs: usize,
    tol: f64,
) -> Result<RunRecord> {
    let config = TrainConfig {
        controller: controller.clone(),
        mode: TrainMode::ExactDual,
        epochs,
        exact_tol: tol,
        ..TrainConfig::default()
    };
    super::train_on(model, &config)
}

pub(super) fn run(model: &CmdpModel, config: &TrainConfig) -> Result<RunRecord> {
    let m = model.n_constraints();
    let mut controllers = controllers_for(model, &config.controller);
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut policy = crate::model::PolicyTable::uniform(model.n_states, model.n_actions);
    for epoch in 0..config.epochs {
        let lambda: Vec<f64> = controllers.iter().map(|c| c.lambda).collect();
        let shaped = shaped_signal(model, &lambda)?;
        let (_, pi) = value_iteration(model, &shaped, config.exact_tol);
        let ret = start_value(model, &evaluate(model, &pi, Signal::Reward)?.v);
        let mut costs = Vec::with_capacity(m);
        for i in 0..m {
            costs.push(start_value(model, &evaluate(model, &pi, Signal::Cost(i))?.v));
        }
        let mut xis = Vec::with_capacity(m);
        for (i, c) in controllers.iter_mut().enumerate() {
            let obs = PenaltyObservation {
                cost_estimate: costs[i],
                cost_limit: model.cost_limits[i],
                epoch_index: epoch,
            };
            xis.push(crate::multiplier::penalty_loss(&obs));
            *c = c.step(&obs);
        }
        metrics.push(EpochMetrics {
            epoch,
            steps: 0,
            return_mean: ret,
            cost_mean: costs,
            lambda,
            xi: xis,
            kl: 0.0,
            inner_iters_used: 1,
        });
        policy = pi;
    }
    Ok(RunRecord {
        config: config.clone(),
        metrics,
        wall_time: 0.0,
        diverged_at: None,
        final_policy: policy,
    })
}
