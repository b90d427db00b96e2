use crate::error::{Error, Result};
use crate::model::{Signal, ValueTable};
use crate::sampling::TrajectoryBatch;

/// Generalized advantage estimates for one signal stream, one vector per
/// episode. Episodes never terminate inside the model, so the final step of
/// each (horizon-truncated) episode bootstraps from the value table.
pub fn gae_advantages(
    batch: &TrajectoryBatch,
    values: &ValueTable,
    gamma: f64,
    lam: f64,
    signal: Signal,
) -> Result<Vec<Vec<f64>>> {
    if let Signal::Cost(i) = signal {
        if batch.episodes.iter().any(|e| i >= e.n_constraints) {
            return Err(Error::InvalidArgument(format!("cost index {i} out of range")));
        }
    }
    let v = &values.v;
    Ok(batch
        .episodes
        .iter()
        .map(|ep| {
            let mut adv = vec![0.0; ep.len()];
            let mut running = 0.0;
            for t in (0..ep.len()).rev() {
                let step = &ep.steps[t];
                let x = match signal {
                    Signal::Reward => step.reward,
                    Signal::Cost(i) => ep.cost(t, i),
                };
                let delta = x + gamma * v[step.next_state] - v[step.state];
                running = delta + gamma * lam * running;
                adv[t] = running;
            }
            adv
        })
        .collect())
}
