//! Builtin tabular CMDP tasks and a seeded random-CMDP generator.
//!
//! The four registry tasks are ordered by difficulty: a speed/boundary ring,
//! two hazard gridworlds of increasing size and hazard density, and a
//! two-goal gridworld whose nearer goal sits behind a ring of hazards.

use std::collections::VecDeque;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::dp::value_iteration;
use crate::error::{Error, Result};
use crate::model::{evaluate, start_value, CmdpModel, Signal};

pub const DEFAULT_GAMMA: f64 = 0.99;
pub const DEFAULT_HORIZON: usize = 500;
pub const SLIP_PROB: f64 = 0.1;
/// Default limits sit this many times below the unconstrained optimum's cost.
pub const LIMIT_RATIO: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub description: String,
    pub difficulty_rank: u32,
    pub model: CmdpModel,
}

/// Discounted cost of the reward-optimal policy.
pub fn unconstrained_cost(model: &CmdpModel, constraint: usize) -> Result<f64> {
    let (_, pi) = value_iteration(model, &model.reward, 1e-10);
    let v = evaluate(model, &pi, Signal::Cost(constraint))?;
    Ok(start_value(model, &v.v))
}

/// Smallest achievable discounted cost for one constraint.
pub fn min_cost(model: &CmdpModel, constraint: usize) -> Result<f64> {
    let negated: Vec<f64> = model.costs[constraint].iter().map(|c| -c).collect();
    let (_, pi) = value_iteration(model, &negated, 1e-10);
    let v = evaluate(model, &pi, Signal::Cost(constraint))?;
    Ok(start_value(model, &v.v))
}

fn set_default_limit(model: &mut CmdpModel) -> Result<()> {
    for i in 0..model.n_constraints() {
        model.cost_limits[i] = unconstrained_cost(model, i)? / LIMIT_RATIO;
    }
    Ok(())
}

const MOVES: [(isize, isize); 4] = [(1, 0), (-1, 0), (0, -1), (0, 1)];

/// Gridworld layout; cells are `row * size + col`.
#[derive(Debug, Clone)]
struct GridLayout {
    size: usize,
    /// Start cells, uniformly weighted in `p0`.
    starts: Vec<usize>,
    goals: Vec<(usize, f64)>,
    hazards: Vec<bool>,
}

impl GridLayout {
    fn step(&self, cell: usize, dir: usize) -> usize {
        let (r, c) = ((cell / self.size) as isize, (cell % self.size) as isize);
        let (dr, dc) = MOVES[dir];
        let (nr, nc) = (r + dr, c + dc);
        if nr < 0 || nc < 0 || nr >= self.size as isize || nc >= self.size as isize {
            cell
        } else {
            nr as usize * self.size + nc as usize
        }
    }

    fn goal_reward(&self, cell: usize) -> Option<f64> {
        self.goals.iter().find(|(g, _)| *g == cell).map(|(_, r)| *r)
    }

    /// Every start cell has a hazard-free path to some goal.
    fn has_safe_path(&self) -> bool {
        self.starts.iter().all(|&s| self.safe_path_from(s))
    }

    fn safe_path_from(&self, start: usize) -> bool {
        let n = self.size * self.size;
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(cell) = queue.pop_front() {
            if self.goal_reward(cell).is_some() {
                return true;
            }
            for dir in 0..4 {
                let next = self.step(cell, dir);
                if !seen[next] && !self.hazards[next] {
                    seen[next] = true;
                    queue.push_back(next);
                }
            }
        }
        false
    }

    fn build(&self) -> CmdpModel {
        let n = self.size * self.size;
        let mut m = CmdpModel::zeros(n, 4, 1, DEFAULT_GAMMA);
        m.horizon = DEFAULT_HORIZON;
        let w = 1.0 / self.starts.len() as f64;
        for &s in &self.starts {
            m.initial_dist[s] = w;
        }
        for s in 0..n {
            for a in 0..4 {
                if self.goal_reward(s).is_some() {
                    // Goal cells hand control back to the start distribution.
                    for &t in &self.starts {
                        let i = m.idx(s, a, t);
                        m.transition[i] = w;
                    }
                    continue;
                }
                let mut row = vec![0.0; n];
                row[self.step(s, a)] += 1.0 - SLIP_PROB;
                for dir in 0..4 {
                    row[self.step(s, dir)] += SLIP_PROB / 4.0;
                }
                for (t, p) in row.into_iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let i = m.idx(s, a, t);
                    m.transition[i] = p;
                    m.reward[i] = self.goal_reward(t).unwrap_or(0.0);
                    m.costs[0][i] = if self.hazards[t] { 1.0 } else { 0.0 };
                }
            }
        }
        m
    }
}

fn random_hazards(
    size: usize,
    density: f64,
    protected: &[usize],
    preset: &[usize],
    rng: &mut ChaCha8Rng,
) -> Vec<bool> {
    let n = size * size;
    let mut hazards = vec![false; n];
    for &h in preset {
        hazards[h] = true;
    }
    let candidates: Vec<usize> = (0..n)
        .filter(|c| !protected.contains(c) && !hazards[*c])
        .collect();
    let count = ((density * (n - protected.len()) as f64).round() as usize).min(candidates.len());
    for k in sample(rng, candidates.len(), count) {
        hazards[candidates[k]] = true;
    }
    hazards
}

fn check_density(density: f64) -> Result<()> {
    if (0.0..=1.0).contains(&density) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("hazard density {density} outside [0, 1]")))
    }
}

/// `size x size` gridworld from the bottom-left corner to a +1 goal in the
/// opposite corner, with seeded hazard cells costing 1 per step spent in them.
pub fn make_grid_hazard(size: usize, hazard_density: f64, seed: u64) -> Result<TaskSpec> {
    if size < 3 {
        return Err(Error::InvalidArgument(format!("grid size {size} < 3")));
    }
    check_density(hazard_density)?;
    let n = size * size;
    let (start, goal) = (0, n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = GridLayout {
        size,
        starts: vec![start],
        goals: vec![(goal, 1.0)],
        hazards: random_hazards(size, hazard_density, &[start, goal], &[], &mut rng),
    };
    if !layout.has_safe_path() {
        return Err(Error::BlockedGrid);
    }
    let mut model = layout.build();
    set_default_limit(&mut model)?;
    Ok(TaskSpec {
        name: format!("grid-hazard-{size}x{size}-d{hazard_density}-s{seed}"),
        description: format!(
            "{size}x{size} hazard gridworld, density {hazard_density}, seed {seed}"
        ),
        difficulty_rank: 0,
        model,
    })
}

/// Gridworld with two +1 goals: one in the far corner and one in the centre,
/// guarded by hazards on its four neighbours, plus seeded random hazards.
/// Episodes start uniformly along the bottom row, so each start cell trades
/// the short hazardous trip against the long safe one at a different price.
pub fn make_grid_two_goal(size: usize, hazard_density: f64, seed: u64) -> Result<TaskSpec> {
    if size < 5 {
        return Err(Error::InvalidArgument(format!("two-goal grid size {size} < 5")));
    }
    check_density(hazard_density)?;
    let n = size * size;
    let far = n - 1;
    let starts: Vec<usize> = (0..size).collect();
    let centre = (size / 2) * size + size / 2;
    let guard: Vec<usize> = [centre - size, centre + size, centre - 1, centre + 1].to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = GridLayout {
        size,
        goals: vec![(far, 1.0), (centre, 1.0)],
        hazards: random_hazards(size, hazard_density, &[&starts[..], &[far, centre]].concat(), &guard, &mut rng),
        starts,
    };
    if !layout.has_safe_path() {
        return Err(Error::BlockedGrid);
    }
    let mut model = layout.build();
    set_default_limit(&mut model)?;
    Ok(TaskSpec {
        name: format!("grid-two-goal-{size}x{size}-d{hazard_density}-s{seed}"),
        description: format!(
            "{size}x{size} two-goal gridworld, density {hazard_density}, seed {seed}"
        ),
        difficulty_rank: 0,
        model,
    })
}

/// Ring of `n` states. Action 0 ("slow") advances one state for reward 0.4
/// and no cost; action 1 ("fast") earns about 1 (seeded per-state jitter of
/// at most 0.1) and half the time overshoots by one state, costing 1.
pub fn make_chain_speed(n: usize, seed: u64) -> Result<TaskSpec> {
    if n < 4 {
        return Err(Error::InvalidArgument(format!("chain length {n} < 4")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = CmdpModel::zeros(n, 2, 1, DEFAULT_GAMMA);
    m.horizon = DEFAULT_HORIZON;
    m.initial_dist[0] = 1.0;
    for s in 0..n {
        let (next, skip) = ((s + 1) % n, (s + 2) % n);
        let i = m.idx(s, 0, next);
        m.transition[i] = 1.0;
        m.reward[i] = 0.4;
        let fast_reward = 1.0 + 0.1 * rng.random_range(-1.0..1.0);
        let i = m.idx(s, 1, next);
        m.transition[i] = 0.5;
        m.reward[i] = fast_reward;
        let i = m.idx(s, 1, skip);
        m.transition[i] = 0.5;
        m.reward[i] = fast_reward;
        m.costs[0][i] = 1.0;
    }
    set_default_limit(&mut m)?;
    Ok(TaskSpec {
        name: format!("chain-speed-{n}-s{seed}"),
        description: format!("{n}-state speed ring, seed {seed}"),
        difficulty_rank: 0,
        model: m,
    })
}

/// Random CMDP for property tests: Dirichlet(1) transitions, uniform rewards,
/// Bernoulli unit costs per `(s, a)`. The limit is the midpoint between the
/// minimum achievable and the unconstrained-optimal discounted cost.
pub fn make_random_cmdp(
    n_states: usize,
    n_actions: usize,
    cost_density: f64,
    seed: u64,
) -> Result<TaskSpec> {
    if n_states < 2 || n_actions < 2 {
        return Err(Error::InvalidArgument(format!(
            "random CMDP needs >= 2 states and actions, got {n_states}x{n_actions}"
        )));
    }
    if !(0.0..=1.0).contains(&cost_density) {
        return Err(Error::InvalidArgument(format!("cost density {cost_density} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = CmdpModel::zeros(n_states, n_actions, 1, 0.9);
    m.horizon = 200;
    for s in 0..n_states {
        for a in 0..n_actions {
            let draws: Vec<f64> = (0..n_states).map(|_| rng.sample::<f64, _>(Exp1)).collect();
            let total: f64 = draws.iter().sum();
            let reward: f64 = rng.random();
            let cost = if rng.random::<f64>() < cost_density { 1.0 } else { 0.0 };
            let mut acc = 0.0;
            for (t, d) in draws.iter().enumerate() {
                let i = m.idx(s, a, t);
                // Last entry absorbs rounding so the row sums to one exactly.
                let p = if t + 1 == n_states { 1.0 - acc } else { d / total };
                acc += p;
                m.transition[i] = p;
                m.reward[i] = reward;
                m.costs[0][i] = cost;
            }
        }
    }
    let draws: Vec<f64> = (0..n_states).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = draws.iter().sum();
    m.initial_dist = draws.iter().map(|d| d / total).collect();
    let last = n_states - 1;
    m.initial_dist[last] = 1.0 - m.initial_dist[..last].iter().sum::<f64>();
    m.cost_limits[0] = 0.5 * (min_cost(&m, 0)? + unconstrained_cost(&m, 0)?);
    Ok(TaskSpec {
        name: format!("random-{n_states}x{n_actions}-c{cost_density}-s{seed}"),
        description: format!("random CMDP with {n_states} states and {n_actions} actions"),
        difficulty_rank: 0,
        model: m,
    })
}

fn named(mut task: TaskSpec, name: &str, rank: u32, description: &str) -> TaskSpec {
    task.name = name.to_string();
    task.difficulty_rank = rank;
    task.description = description.to_string();
    task
}

/// The four builtin tasks, ordered by increasing difficulty.
pub fn registry() -> Vec<TaskSpec> {
    vec![
        named(
            make_chain_speed(8, 0).expect("builtin chain"),
            "chain-speed",
            1,
            "8-state speed ring: fast earns more but risks boundary excursions",
        ),
        named(
            make_grid_hazard(5, 0.2, 580).expect("builtin grid"),
            "grid-hazard-small",
            2,
            "5x5 gridworld with sparse hazards between start and goal",
        ),
        named(
            make_grid_hazard(6, 0.25, 1076).expect("builtin grid"),
            "grid-hazard-dense",
            3,
            "6x6 gridworld with dense hazards",
        ),
        named(
            make_grid_two_goal(7, 0.15, 5).expect("builtin grid"),
            "grid-two-goal",
            4,
            "7x7 gridworld with a hazard-guarded near goal and a safe far goal",
        ),
    ]
}

pub fn task_by_name(name: &str) -> Result<TaskSpec> {
    registry()
        .into_iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::UnknownTask(name.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_model;

    #[test]
    fn registry_contract() {
        let tasks = registry();
        assert_eq!(tasks.len(), 4);
        let mut names: Vec<&str> = tasks.iter().map(|t| t.name.as_str()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 4);
        for t in &tasks {
            assert!(validate_model(&t.model).is_empty(), "{}", t.name);
        }
        assert!(tasks.windows(2).all(|w| w[0].difficulty_rank < w[1].difficulty_rank));
    }

    #[test]
    fn default_limits_are_violated_by_the_unconstrained_optimum() {
        for t in registry() {
            let unc = unconstrained_cost(&t.model, 0).unwrap();
            let ratio = unc / t.model.cost_limits[0];
            assert!((2.0..=4.0).contains(&ratio), "{}: ratio {ratio}", t.name);
            assert!(min_cost(&t.model, 0).unwrap() < t.model.cost_limits[0], "{}", t.name);
        }
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(make_grid_hazard(5, 0.2, 7).unwrap(), make_grid_hazard(5, 0.2, 7).unwrap());
        assert_eq!(make_chain_speed(6, 2).unwrap(), make_chain_speed(6, 2).unwrap());
        assert_eq!(
            make_random_cmdp(4, 3, 0.5, 9).unwrap(),
            make_random_cmdp(4, 3, 0.5, 9).unwrap()
        );
        assert_ne!(
            make_random_cmdp(4, 3, 0.5, 9).unwrap().model,
            make_random_cmdp(4, 3, 0.5, 10).unwrap().model
        );
    }

    #[test]
    fn generated_models_are_valid_for_many_seeds() {
        for seed in 0..200 {
            let r = make_random_cmdp(2 + seed as usize % 5, 2 + seed as usize % 3, 0.4, seed).unwrap();
            assert!(validate_model(&r.model).is_empty(), "random seed {seed}");
            assert!(validate_model(&make_chain_speed(4 + seed as usize % 6, seed).unwrap().model).is_empty());
            match make_grid_hazard(3 + seed as usize % 5, 0.25, seed) {
                Ok(t) => assert!(validate_model(&t.model).is_empty(), "grid seed {seed}"),
                Err(Error::BlockedGrid) => {}
                Err(e) => panic!("grid seed {seed}: {e}"),
            }
        }
    }

    #[test]
    fn hazard_free_grid_has_zero_cost() {
        let t = make_grid_hazard(3, 0.0, 1).unwrap();
        assert!(t.model.costs[0].iter().all(|&c| c == 0.0));
        assert_eq!(t.model.cost_limits[0], 0.0);
    }

    #[test]
    fn full_density_is_rejected_as_blocked() {
        assert!(matches!(make_grid_hazard(4, 1.0, 0), Err(Error::BlockedGrid)));
        assert!(make_grid_hazard(2, 0.0, 0).is_err());
        assert!(make_grid_hazard(4, 1.5, 0).is_err());
    }

    /// Every state can reach a goal cell with positive probability, whatever
    /// the policy: slips give every move direction positive mass.
    #[test]
    fn goals_reachable_under_every_policy() {
        for t in registry().into_iter().skip(1) {
            let m = &t.model;
            let goals: Vec<usize> = (0..m.n_states)
                .filter(|&s| (0..m.n_states).any(|x| m.reward[m.idx(x, 0, s)] > 0.0 && m.p(x, 0, s) > 0.0))
                .collect();
            assert!(!goals.is_empty());
            // Reverse reachability along edges that have positive probability under every action.
            let mut reach = vec![false; m.n_states];
            for &g in &goals {
                reach[g] = true;
            }
            loop {
                let mut changed = false;
                for s in 0..m.n_states {
                    if !reach[s]
                        && (0..m.n_states).any(|x| reach[x] && (0..m.n_actions).all(|a| m.p(s, a, x) > 0.0))
                    {
                        reach[s] = true;
                        changed = true;
                    }
                }
                if !changed {
                    break;
                }
            }
            assert!(reach.iter().all(|&r| r), "{}", t.name);
        }
    }

    #[test]
    fn unknown_task_is_an_error() {
        assert!(matches!(task_by_name("nope"), Err(Error::UnknownTask(_))));
        assert_eq!(task_by_name("grid-two-goal").unwrap().difficulty_rank, 4);
    }
}
