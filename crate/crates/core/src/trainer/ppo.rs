//! Lagrangian PPO on a tabular softmax policy with analytic gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{evaluate_expected, softmax_into, CmdpModel, PolicyTable, Signal};
use crate::multiplier::{penalty_loss, ControllerState, PenaltyObservation};
use crate::sampling::{derive_seed, sample_trajectories, Episode, TrajectoryBatch};

use super::{gae_advantages, ConstraintSignal, EpochMetrics, OptimizerKind, TrainConfig};

/// Reverts a minibatch step that overshoots the KL target by this factor.
const KL_REVERT_FACTOR: f64 = 1.5;

/// Softmax policy parameterized by one logit per `(s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicy {
    pub n_states: usize,
    pub n_actions: usize,
    pub logits: Vec<f64>,
}

impl SoftmaxPolicy {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            logits: vec![0.0; n_states * n_actions],
        }
    }

    pub fn to_table(&self) -> PolicyTable {
        PolicyTable::from_logits(self.n_states, self.n_actions, &self.logits)
    }

    fn row_probs(&self, s: usize, out: &mut [f64]) {
        let na = self.n_actions;
        softmax_into(&self.logits[s * na..(s + 1) * na], out);
    }
}

/// Ascent rule for the logits. Adam state persists across epochs, as in
/// standard PPO implementations.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOptimizer {
    pub kind: OptimizerKind,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl PolicyOptimizer {
    pub fn new(kind: OptimizerKind, n_params: usize) -> Self {
        Self {
            kind,
            first: vec![0.0; n_params],
            second: vec![0.0; n_params],
            steps: 0,
        }
    }

    /// Moves `params` uphill along `grad`.
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p += lr * g;
                }
            }
            OptimizerKind::Adam => {
                self.steps += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(self.steps);
                let c2 = 1.0 - ADAM_BETA2.powi(self.steps);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.first[i] = ADAM_BETA1 * self.first[i] + (1.0 - ADAM_BETA1) * g;
                    self.second[i] = ADAM_BETA2 * self.second[i] + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = self.first[i] / c1;
                    let v_hat = self.second[i] / c2;
                    params[i] += lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// One sample of the clipped surrogate: state, action, behaviour
/// probability of the action, and its (penalized) advantage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateSample {
    pub state: usize,
    pub action: usize,
    pub old_prob: f64,
    pub advantage: f64,
}

/// Mean clipped surrogate `min(rho A, clip(rho, 1-eps, 1+eps) A)` plus the
/// entropy bonus, over `samples`.
pub fn clipped_surrogate(
    policy: &SoftmaxPolicy,
    samples: &[SurrogateSample],
    clip: f64,
    entropy_coef: f64,
) -> f64 {
    let mut probs = vec![0.0; policy.n_actions];
    let mut total = 0.0;
    for smp in samples {
        policy.row_probs(smp.state, &mut probs);
        let rho = probs[smp.action] / smp.old_prob;
        let a = smp.advantage;
        total += (rho * a).min(rho.clamp(1.0 - clip, 1.0 + clip) * a);
        if entropy_coef != 0.0 {
            total += entropy_coef * entropy(&probs);
        }
    }
    total / samples.len() as f64
}

fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Analytic gradient of [`clipped_surrogate`] with respect to every logit.
pub fn clipped_surrogate_grad(
    policy: &SoftmaxPolicy,
    samples: &[SurrogateSample],
    clip: f64,
    entropy_coef: f64,
) -> Vec<f64> {
    let mut grad = vec![0.0; policy.logits.len()];
    accumulate_grad(policy, samples, clip, entropy_coef, &mut grad);
    grad
}

fn accumulate_grad(
    policy: &SoftmaxPolicy,
    samples: &[SurrogateSample],
    clip: f64,
    entropy_coef: f64,
    grad: &mut [f64],
) {
    let na = policy.n_actions;
    let scale = 1.0 / samples.len() as f64;
    let mut probs = vec![0.0; na];
    for smp in samples {
        policy.row_probs(smp.state, &mut probs);
        let row = &mut grad[smp.state * na..(smp.state + 1) * na];
        let rho = probs[smp.action] / smp.old_prob;
        let a = smp.advantage;
        // Only the unclipped branch carries gradient.
        let clipped = (a > 0.0 && rho > 1.0 + clip) || (a < 0.0 && rho < 1.0 - clip);
        if !clipped {
            let w = scale * a * rho;
            for (b, g) in row.iter_mut().enumerate() {
                let indicator = if b == smp.action { 1.0 } else { 0.0 };
                *g += w * (indicator - probs[b]);
            }
        }
        if entropy_coef != 0.0 {
            let h = entropy(&probs);
            for (b, g) in row.iter_mut().enumerate() {
                let p = probs[b];
                if p > 0.0 {
                    *g -= scale * entropy_coef * p * (p.ln() + h);
                }
            }
        }
    }
}

/// Sample-weighted mean `KL(old || new)` over visited states.
pub fn mean_kl(old: &PolicyTable, new: &SoftmaxPolicy, state_counts: &[(usize, usize)]) -> f64 {
    let na = new.n_actions;
    let mut probs = vec![0.0; na];
    let (mut total, mut n) = (0.0, 0usize);
    for &(s, count) in state_counts {
        new.row_probs(s, &mut probs);
        let kl: f64 = old
            .row(s)
            .iter()
            .zip(&probs)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, q)| p * (p / q).ln())
            .sum();
        total += kl * count as f64;
        n += count;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// `(A_r - sum_i lambda_i A_c_i) / (1 + sum_i lambda_i)`, step by step.
pub fn penalized_advantages(reward_adv: &[f64], cost_adv: &[Vec<f64>], lambda: &[f64]) -> Vec<f64> {
    let total: f64 = lambda.iter().sum();
    if total == 0.0 {
        return reward_adv.to_vec();
    }
    (0..reward_adv.len())
        .map(|t| {
            let penalty: f64 = lambda.iter().zip(cost_adv).map(|(l, c)| l * c[t]).sum();
            (reward_adv[t] - penalty) / (1.0 + total)
        })
        .collect()
}

fn discounted(values: impl DoubleEndedIterator<Item = f64>, gamma: f64) -> f64 {
    values.rev().fold(0.0, |acc, x| x + gamma * acc)
}

fn episode_return(ep: &Episode, signal: ConstraintSignal, gamma: f64) -> f64 {
    match signal {
        ConstraintSignal::EpisodicMean => ep.return_sum,
        ConstraintSignal::Discounted => discounted(ep.steps.iter().map(|s| s.reward), gamma),
    }
}

fn episode_cost(ep: &Episode, i: usize, signal: ConstraintSignal, gamma: f64) -> f64 {
    match signal {
        ConstraintSignal::EpisodicMean => ep.cost_sums[i],
        ConstraintSignal::Discounted => discounted((0..ep.len()).map(|t| ep.cost(t, i)), gamma),
    }
}

fn batch_mean(batch: &TrajectoryBatch, f: impl Fn(&Episode) -> f64) -> f64 {
    batch.episodes.iter().map(f).sum::<f64>() / batch.episodes.len() as f64
}

/// One epoch of PPO-Lag:
///
/// 1. sample at least `steps_per_epoch` transitions as whole episodes;
/// 2. estimate each constraint's cost via `constraint_signal`;
/// 3. read the multipliers, then step the controllers on `xi`;
/// 4. run up to `inner_iters` minibatch passes of clipped-surrogate ascent
///    on the penalized advantage, with the multipliers read in step 3,
///    stopping once the mean KL from the behaviour policy exceeds
///    `target_kl`.
pub fn ppo_lag_epoch(
    model: &CmdpModel,
    policy: &SoftmaxPolicy,
    optimizer: &mut PolicyOptimizer,
    controllers: &[ControllerState],
    config: &TrainConfig,
    seed: u64,
    epoch: usize,
) -> Result<(SoftmaxPolicy, Vec<ControllerState>, EpochMetrics)> {
    let m = model.n_constraints();
    let old = policy.to_table();
    let n_episodes = config.steps_per_epoch.div_ceil(model.horizon).max(1);
    let batch = sample_trajectories(model, &old, n_episodes, seed);
    let signal = config.constraint_signal;

    let return_mean = batch_mean(&batch, |e| episode_return(e, signal, config.gamma_r));
    let cost_mean: Vec<f64> = (0..m)
        .map(|i| batch_mean(&batch, |e| episode_cost(e, i, signal, config.gamma_c)))
        .collect();

    let lambda: Vec<f64> = controllers.iter().map(|c| c.lambda).collect();
    let mut xi = Vec::with_capacity(m);
    let next_controllers: Vec<ControllerState> = controllers
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let obs = PenaltyObservation {
                cost_estimate: cost_mean[i],
                cost_limit: model.cost_limits[i],
                epoch_index: epoch,
            };
            xi.push(penalty_loss(&obs));
            c.step(&obs)
        })
        .collect();

    // Exact values of the behaviour policy serve as the GAE baseline.
    let reward_values = evaluate_expected(
        model,
        &old,
        &model.expected_signal(&model.reward),
        config.gamma_r,
        Signal::Reward,
    )?;
    let reward_adv = gae_advantages(&batch, &reward_values, config.gamma_r, config.gae_lambda, Signal::Reward)?;
    let mut cost_adv = Vec::with_capacity(m);
    for i in 0..m {
        let values = evaluate_expected(
            model,
            &old,
            &model.expected_signal(&model.costs[i]),
            config.gamma_c,
            Signal::Cost(i),
        )?;
        cost_adv.push(gae_advantages(&batch, &values, config.gamma_c, config.gae_lambda, Signal::Cost(i))?);
    }

    let mut samples = Vec::with_capacity(batch.total_steps());
    for (k, ep) in batch.episodes.iter().enumerate() {
        let costs: Vec<Vec<f64>> = cost_adv.iter().map(|c| c[k].clone()).collect();
        let adv = penalized_advantages(&reward_adv[k], &costs, &lambda);
        for (step, a) in ep.steps.iter().zip(adv) {
            samples.push(SurrogateSample {
                state: step.state,
                action: step.action,
                old_prob: old.prob(step.state, step.action),
                advantage: a,
            });
        }
    }
    let mut counts = vec![0usize; model.n_states];
    for smp in &samples {
        counts[smp.state] += 1;
    }
    let state_counts: Vec<(usize, usize)> = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(s, &c)| (s, c))
        .collect();

    let mut current = policy.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5eed));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut grad = vec![0.0; current.logits.len()];
    let mut minibatch = Vec::with_capacity(config.batch_size);
    let (mut kl, mut iters_used) = (0.0, 0);
    'passes: for _ in 0..config.inner_iters {
        iters_used += 1;
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            minibatch.clear();
            minibatch.extend(chunk.iter().map(|&j| samples[j]));
            grad.iter_mut().for_each(|g| *g = 0.0);
            accumulate_grad(&current, &minibatch, config.clip_ratio, config.entropy_coef, &mut grad);
            let before = (current.logits.clone(), optimizer.clone());
            optimizer.ascend(&mut current.logits, &grad, config.learning_rate);
            if current.logits.iter().any(|l| !l.is_finite()) {
                return Err(Error::Divergence { epoch });
            }
            let new_kl = mean_kl(&old, &current, &state_counts);
            if new_kl > config.target_kl {
                if new_kl > KL_REVERT_FACTOR * config.target_kl {
                    (current.logits, *optimizer) = before;
                } else {
                    kl = new_kl;
                }
                break 'passes;
            }
            kl = new_kl;
        }
    }

    Ok((
        current,
        next_controllers,
        EpochMetrics {
            epoch,
            steps: batch.total_steps(),
            return_mean,
            cost_mean,
            lambda,
            xi,
            kl,
            inner_iters_used: iters_used,
        },
    ))
}
