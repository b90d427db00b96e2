//! Bellman-optimal control for an arbitrary per-transition signal.

use crate::model::{CmdpModel, PolicyTable, Signal, ValueTable};

/// Ties within this margin resolve to the lowest action index.
const TIE_EPS: f64 = 1e-12;

/// Value iteration on `signal` (indexed `(s, a, s')`).
///
/// Stops once the sup-norm update falls below `tol * (1 - gamma) / gamma`,
/// which puts the returned values within `tol` of the optimum, then returns
/// the greedy deterministic policy with ties broken toward the lowest action.
pub fn value_iteration(model: &CmdpModel, signal: &[f64], tol: f64) -> (ValueTable, PolicyTable) {
    assert!(tol > 0.0, "tolerance must be positive");
    let expected = model.expected_signal(signal);
    value_iteration_expected(model, &expected, tol)
}

pub(crate) fn value_iteration_expected(
    model: &CmdpModel,
    expected: &[f64],
    tol: f64,
) -> (ValueTable, PolicyTable) {
    let (ns, na, gamma) = (model.n_states, model.n_actions, model.gamma);
    let threshold = if gamma > 0.0 {
        tol * (1.0 - gamma) / gamma
    } else {
        f64::INFINITY
    };
    let mut v = vec![0.0; ns];
    let mut next = vec![0.0; ns];
    loop {
        let mut delta: f64 = 0.0;
        for s in 0..ns {
            let best = (0..na)
                .map(|a| q_value(model, expected, &v, s, a))
                .fold(f64::NEG_INFINITY, f64::max);
            delta = delta.max((best - v[s]).abs());
            next[s] = best;
        }
        std::mem::swap(&mut v, &mut next);
        if delta < threshold || gamma == 0.0 {
            break;
        }
    }
    let actions = greedy_actions(model, expected, &v);
    (
        ValueTable {
            v,
            signal: Signal::Reward,
            gamma_used: gamma,
        },
        PolicyTable::deterministic(na, &actions),
    )
}

#[inline]
fn q_value(model: &CmdpModel, expected: &[f64], v: &[f64], s: usize, a: usize) -> f64 {
    let future: f64 = model.row(s, a).iter().zip(v).map(|(p, x)| p * x).sum();
    expected[s * model.n_actions + a] + model.gamma * future
}

/// Greedy action per state with lowest-index tie-breaking.
pub(crate) fn greedy_actions(model: &CmdpModel, expected: &[f64], v: &[f64]) -> Vec<usize> {
    (0..model.n_states)
        .map(|s| {
            let q: Vec<f64> = (0..model.n_actions)
                .map(|a| q_value(model, expected, v, s, a))
                .collect();
            let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let margin = TIE_EPS * (1.0 + best.abs());
            q.iter().position(|&x| x >= best - margin).unwrap_or(0)
        })
        .collect()
}

/// Every deterministic policy as an action vector, in lexicographic order.
pub(crate) fn deterministic_policies(n_states: usize, n_actions: usize) -> impl Iterator<Item = Vec<usize>> {
    let count = n_actions.pow(n_states as u32);
    (0..count).map(move |mut code| {
        (0..n_states)
            .map(|_| {
                let a = code % n_actions;
                code /= n_actions;
                a
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::make_random_cmdp;
    use crate::model::evaluate_expected;

    fn one_state_two_actions(r0: f64, r1: f64, gamma: f64) -> CmdpModel {
        let mut m = CmdpModel::zeros(1, 2, 0, gamma);
        m.transition = vec![1.0, 1.0];
        m.reward = vec![r0, r1];
        m.initial_dist = vec![1.0];
        m
    }

    #[test]
    fn dominant_action_is_chosen() {
        let m = one_state_two_actions(1.0, 0.0, 0.9);
        let (v, pi) = value_iteration(&m, &m.reward, 1e-10);
        assert_eq!(pi.probs, vec![1.0, 0.0]);
        assert!((v.v[0] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn ties_go_to_lowest_action() {
        let m = one_state_two_actions(0.5, 0.5, 0.9);
        let (_, pi) = value_iteration(&m, &m.reward, 1e-10);
        assert_eq!(pi.probs, vec![1.0, 0.0]);
        let m = one_state_two_actions(0.0, 0.5, 0.9);
        let (_, pi) = value_iteration(&m, &m.reward, 1e-10);
        assert_eq!(pi.probs, vec![0.0, 1.0]);
    }

    #[test]
    fn matches_exhaustive_enumeration() {
        for seed in 0..10 {
            let task = make_random_cmdp(4, 3, 0.5, seed).unwrap();
            let m = &task.model;
            let expected = m.expected_signal(&m.reward);
            let tol = 1e-8;
            let best_per_state = deterministic_policies(4, 3)
                .map(|acts| {
                    let pi = PolicyTable::deterministic(3, &acts);
                    evaluate_expected(m, &pi, &expected, m.gamma, Signal::Reward)
                        .unwrap()
                        .v
                })
                .fold(vec![f64::NEG_INFINITY; 4], |acc, v| {
                    acc.iter().zip(&v).map(|(a, b)| a.max(*b)).collect()
                });
            let (v, pi) = value_iteration(m, &m.reward, tol);
            let exact = evaluate_expected(m, &pi, &expected, m.gamma, Signal::Reward).unwrap();
            for s in 0..4 {
                assert!((v.v[s] - best_per_state[s]).abs() <= tol, "seed {seed}");
                assert!((exact.v[s] - best_per_state[s]).abs() <= tol, "seed {seed}");
            }
        }
    }

    #[test]
    fn enumerates_every_policy_once() {
        let all: Vec<Vec<usize>> = deterministic_policies(3, 2).collect();
        assert_eq!(all.len(), 8);
        let mut sorted = all.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 8);
    }
}
