//! Tabular CMDP data model and exact evaluation.
//!
//! All tensors are stored flat in row-major `(s, a, s')` order so the JSON
//! export is a direct serialization of the struct.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MASS_TOL: f64 = 1e-12;

/// Which per-transition signal an evaluation targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    Reward,
    Cost(usize),
}

/// Full tabular CMDP: dynamics, reward, costs, start distribution, discount,
/// cost limits and the sampling horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CmdpModel {
    pub n_states: usize,
    pub n_actions: usize,
    pub transition: Vec<f64>,
    pub reward: Vec<f64>,
    pub costs: Vec<Vec<f64>>,
    pub initial_dist: Vec<f64>,
    pub gamma: f64,
    pub cost_limits: Vec<f64>,
    pub horizon: usize,
}

impl CmdpModel {
    /// Zero-initialized model with `m` constraints; transitions must be filled in.
    pub fn zeros(n_states: usize, n_actions: usize, m: usize, gamma: f64) -> Self {
        let n = n_states * n_actions * n_states;
        Self {
            n_states,
            n_actions,
            transition: vec![0.0; n],
            reward: vec![0.0; n],
            costs: vec![vec![0.0; n]; m],
            initial_dist: vec![0.0; n_states],
            gamma,
            cost_limits: vec![0.0; m],
            horizon: 500,
        }
    }

    #[inline]
    pub fn idx(&self, s: usize, a: usize, next: usize) -> usize {
        (s * self.n_actions + a) * self.n_states + next
    }

    #[inline]
    pub fn n_constraints(&self) -> usize {
        self.costs.len()
    }

    #[inline]
    pub fn p(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition[self.idx(s, a, next)]
    }

    /// Transition row `p(. | s, a)`.
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = self.idx(s, a, 0);
        &self.transition[start..start + self.n_states]
    }

    pub fn signal_tensor(&self, signal: Signal) -> &[f64] {
        match signal {
            Signal::Reward => &self.reward,
            Signal::Cost(i) => &self.costs[i],
        }
    }

    /// Expected one-step signal `sum_s' p(s'|s,a) x(s,a,s')`, indexed `(s, a)`.
    pub fn expected_signal(&self, tensor: &[f64]) -> Vec<f64> {
        let (ns, na) = (self.n_states, self.n_actions);
        let mut out = vec![0.0; ns * na];
        for s in 0..ns {
            for a in 0..na {
                let base = self.idx(s, a, 0);
                out[s * na + a] = (0..ns)
                    .map(|t| self.transition[base + t] * tensor[base + t])
                    .sum();
            }
        }
        out
    }

    /// Copy of the model with every cost limit replaced.
    pub fn with_cost_limits(&self, limits: Vec<f64>) -> Self {
        Self {
            cost_limits: limits,
            ..self.clone()
        }
    }

    pub fn check_signal(&self, signal: Signal) -> Result<()> {
        match signal {
            Signal::Cost(i) if i >= self.n_constraints() => Err(Error::InvalidArgument(format!(
                "cost index {i} out of range for {} constraints",
                self.n_constraints()
            ))),
            _ => Ok(()),
        }
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let violations = validate_model(self);
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidModel(violations.join("; ")))
        }
    }
}

/// Lists every broken model invariant; an empty list means the model is valid.
pub fn validate_model(model: &CmdpModel) -> Vec<String> {
    let mut out = Vec::new();
    let (ns, na) = (model.n_states, model.n_actions);
    if ns == 0 {
        out.push("n_states must be positive".to_string());
    }
    if na == 0 {
        out.push("n_actions must be positive".to_string());
    }
    if model.horizon == 0 {
        out.push("horizon must be positive".to_string());
    }
    if !(0.0..1.0).contains(&model.gamma) {
        out.push(format!("gamma {} outside [0, 1)", model.gamma));
    }
    let n = ns * na * ns;
    if model.transition.len() != n {
        out.push(format!(
            "transition has {} entries, expected {n}",
            model.transition.len()
        ));
    }
    if model.reward.len() != n {
        out.push(format!("reward has {} entries, expected {n}", model.reward.len()));
    }
    if model.costs.len() != model.cost_limits.len() {
        out.push(format!(
            "arity mismatch: {} cost tensors but {} cost limits",
            model.costs.len(),
            model.cost_limits.len()
        ));
    }
    for (i, c) in model.costs.iter().enumerate() {
        if c.len() != n {
            out.push(format!("cost {i} has {} entries, expected {n}", c.len()));
        } else if let Some(k) = c.iter().position(|&x| !(x >= 0.0) || !x.is_finite()) {
            let (s, a, t) = (k / (na * ns), (k / ns) % na, k % ns);
            out.push(format!("cost {i} at ({s}, {a}, {t}) is negative or non-finite"));
        }
    }
    if let Some(k) = model.reward.iter().position(|x| !x.is_finite()) {
        out.push(format!("reward entry {k} is non-finite"));
    }
    for (i, d) in model.cost_limits.iter().enumerate() {
        if !d.is_finite() {
            out.push(format!("cost limit {i} is non-finite"));
        }
    }
    if model.transition.len() == n {
        for s in 0..ns {
            for a in 0..na {
                let row = model.row(s, a);
                if row.iter().any(|&p| !(p >= 0.0)) {
                    out.push(format!("transition row ({s}, {a}) has a negative entry"));
                    continue;
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > MASS_TOL {
                    out.push(format!("transition row ({s}, {a}) sums to {sum}, not 1"));
                }
            }
        }
    }
    if model.initial_dist.len() != ns {
        out.push(format!(
            "initial_dist has {} entries, expected {ns}",
            model.initial_dist.len()
        ));
    } else if model.initial_dist.iter().any(|&p| !(p >= 0.0)) {
        out.push("initial_dist has a negative entry".to_string());
    } else {
        let sum: f64 = model.initial_dist.iter().sum();
        if (sum - 1.0).abs() > MASS_TOL {
            out.push(format!("initial_dist sums to {sum}, not 1"));
        }
    }
    out
}

/// A stationary stochastic policy as an explicit probability table `(s, a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub probs: Vec<f64>,
}

impl PolicyTable {
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Self {
        let n_states = actions.len();
        let mut probs = vec![0.0; n_states * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            probs[s * n_actions + a] = 1.0;
        }
        Self {
            n_states,
            n_actions,
            probs,
        }
    }

    /// Row-wise softmax of a logit matrix.
    pub fn from_logits(n_states: usize, n_actions: usize, logits: &[f64]) -> Self {
        let mut probs = vec![0.0; n_states * n_actions];
        for s in 0..n_states {
            let row = &logits[s * n_actions..(s + 1) * n_actions];
            softmax_into(row, &mut probs[s * n_actions..(s + 1) * n_actions]);
        }
        Self {
            n_states,
            n_actions,
            probs,
        }
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// Largest deviation of any row sum from one.
    pub fn max_row_error(&self) -> f64 {
        (0..self.n_states)
            .map(|s| (self.row(s).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// State values of one signal under one policy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueTable {
    pub v: Vec<f64>,
    pub signal: Signal,
    pub gamma_used: f64,
}

/// Discounted state-action visitation `mu(s, a)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OccupancyMeasure {
    pub n_states: usize,
    pub n_actions: usize,
    pub mu: Vec<f64>,
}

impl OccupancyMeasure {
    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.mu[s * self.n_actions + a]
    }

    pub fn total_mass(&self) -> f64 {
        self.mu.iter().sum()
    }

    /// `<mu, x>` for an `(s, a)` indexed expected signal.
    pub fn dot(&self, expected: &[f64]) -> f64 {
        self.mu.iter().zip(expected).map(|(m, x)| m * x).sum()
    }

    /// Largest violation of the discounted flow equations.
    pub fn flow_residual(&self, model: &CmdpModel) -> f64 {
        let (ns, na) = (model.n_states, model.n_actions);
        let mut inflow = model.initial_dist.clone();
        for s in 0..ns {
            for a in 0..na {
                let m = self.get(s, a);
                if m == 0.0 {
                    continue;
                }
                for (t, p) in model.row(s, a).iter().enumerate() {
                    inflow[t] += model.gamma * m * p;
                }
            }
        }
        (0..ns)
            .map(|t| ((0..na).map(|a| self.get(t, a)).sum::<f64>() - inflow[t]).abs())
            .fold(0.0, f64::max)
    }
}

fn policy_matrices(
    model: &CmdpModel,
    policy: &PolicyTable,
    expected: &[f64],
) -> (DMatrix<f64>, DVector<f64>) {
    let (ns, na) = (model.n_states, model.n_actions);
    let mut p = DMatrix::zeros(ns, ns);
    let mut r = DVector::zeros(ns);
    for s in 0..ns {
        for a in 0..na {
            let pi = policy.prob(s, a);
            if pi == 0.0 {
                continue;
            }
            r[s] += pi * expected[s * na + a];
            for (t, q) in model.row(s, a).iter().enumerate() {
                p[(s, t)] += pi * q;
            }
        }
    }
    (p, r)
}

fn solve(matrix: DMatrix<f64>, rhs: DVector<f64>) -> Result<DVector<f64>> {
    matrix
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("singular policy evaluation system".into()))
}

/// Exact policy evaluation by a direct linear solve of `(I - gamma P_pi) v = r_pi`.
pub fn evaluate(model: &CmdpModel, policy: &PolicyTable, signal: Signal) -> Result<ValueTable> {
    model.check_signal(signal)?;
    let expected = model.expected_signal(model.signal_tensor(signal));
    evaluate_expected(model, policy, &expected, model.gamma, signal)
}

/// Evaluation of an arbitrary `(s, a)` expected signal at an explicit discount.
pub fn evaluate_expected(
    model: &CmdpModel,
    policy: &PolicyTable,
    expected: &[f64],
    gamma: f64,
    signal: Signal,
) -> Result<ValueTable> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} outside [0, 1)")));
    }
    let ns = model.n_states;
    let (p, r) = policy_matrices(model, policy, expected);
    let system = DMatrix::identity(ns, ns) - &p * gamma;
    let v = solve(system, r.clone())?;
    debug_assert!({
        let residual = (&v - (&r + &p * &v * gamma)).amax();
        residual < 1e-10 * (1.0 + v.amax())
    });
    Ok(ValueTable {
        v: v.iter().copied().collect(),
        signal,
        gamma_used: gamma,
    })
}

/// Sup-norm Bellman residual `|v - (r_pi + gamma P_pi v)|` of a value table.
pub fn bellman_residual(model: &CmdpModel, policy: &PolicyTable, values: &ValueTable) -> f64 {
    let expected = model.expected_signal(model.signal_tensor(values.signal));
    let (p, r) = policy_matrices(model, policy, &expected);
    let v = DVector::from_column_slice(&values.v);
    (&v - (&r + &p * &v * values.gamma_used)).amax()
}

/// `J = sum_s p0(s) v(s)` for the chosen signal.
pub fn objective(model: &CmdpModel, policy: &PolicyTable, signal: Signal) -> Result<f64> {
    let values = evaluate(model, policy, signal)?;
    Ok(start_value(model, &values.v))
}

/// Expected discounted signal over the first `horizon` steps only, the
/// quantity sampled episodes estimate. Differs from [`objective`] by at most
/// `gamma^horizon / (1 - gamma) * max |signal|`.
pub fn truncated_objective(
    model: &CmdpModel,
    policy: &PolicyTable,
    signal: Signal,
    horizon: usize,
) -> Result<f64> {
    model.check_signal(signal)?;
    let expected = model.expected_signal(model.signal_tensor(signal));
    let (p, r) = policy_matrices(model, policy, &expected);
    let mut dist = DVector::from_column_slice(&model.initial_dist);
    let (mut total, mut discount) = (0.0, 1.0);
    for _ in 0..horizon {
        total += discount * dist.dot(&r);
        dist = p.tr_mul(&dist);
        discount *= model.gamma;
    }
    Ok(total)
}

pub(crate) fn start_value(model: &CmdpModel, v: &[f64]) -> f64 {
    model.initial_dist.iter().zip(v).map(|(p, x)| p * x).sum()
}

/// Occupancy of a policy: `mu(s, a) = d_pi(s) pi(a|s)` with `d_pi` solving the
/// discounted flow equations `(I - gamma P_pi^T) d = p0`.
pub fn occupancy_from_policy(model: &CmdpModel, policy: &PolicyTable) -> Result<OccupancyMeasure> {
    let (ns, na) = (model.n_states, model.n_actions);
    let (p, _) = policy_matrices(model, policy, &vec![0.0; ns * na]);
    let system = DMatrix::identity(ns, ns) - p.transpose() * model.gamma;
    let d = solve(system, DVector::from_column_slice(&model.initial_dist))?;
    let mut mu = vec![0.0; ns * na];
    for s in 0..ns {
        let mass = d[s].max(0.0);
        for a in 0..na {
            mu[s * na + a] = mass * policy.prob(s, a);
        }
    }
    Ok(OccupancyMeasure {
        n_states: ns,
        n_actions: na,
        mu,
    })
}

/// Normalizes occupancy rows into a policy; rows without mass become uniform.
pub fn policy_from_occupancy(mu: &OccupancyMeasure) -> PolicyTable {
    let (ns, na) = (mu.n_states, mu.n_actions);
    let mut probs = vec![0.0; ns * na];
    for s in 0..ns {
        let row = &mu.mu[s * na..(s + 1) * na];
        let total: f64 = row.iter().map(|m| m.max(0.0)).sum();
        for a in 0..na {
            probs[s * na + a] = if total > 1e-12 {
                row[a].max(0.0) / total
            } else {
                1.0 / na as f64
            };
        }
    }
    PolicyTable {
        n_states: ns,
        n_actions: na,
        probs,
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// One state, one action, constant reward.
    pub fn single_state(reward: f64, cost: f64, gamma: f64) -> CmdpModel {
        let mut m = CmdpModel::zeros(1, 1, 1, gamma);
        m.transition[0] = 1.0;
        m.reward[0] = reward;
        m.costs[0][0] = cost;
        m.initial_dist[0] = 1.0;
        m.cost_limits[0] = 1.0;
        m
    }

    /// Two states, one action: 0 -> 1 w.p. 0.5, 1 -> 0 w.p. 0.5, reward 1 in state 1.
    pub fn two_state_chain(gamma: f64) -> CmdpModel {
        let mut m = CmdpModel::zeros(2, 1, 1, gamma);
        for s in 0..2 {
            let i = m.idx(s, 0, 0);
            m.transition[i] = 0.5;
            m.transition[i + 1] = 0.5;
        }
        for s in 0..2 {
            for t in 0..2 {
                let i = m.idx(s, 0, t);
                m.reward[i] = if s == 1 { 1.0 } else { 0.0 };
                m.costs[0][i] = if t == 0 { 0.3 } else { 0.0 };
            }
        }
        m.initial_dist[0] = 1.0;
        m.cost_limits[0] = 1.0;
        m
    }

    /// Two mirrored states and two actions (stay / switch).
    pub fn symmetric_pair(gamma: f64) -> CmdpModel {
        let mut m = CmdpModel::zeros(2, 2, 1, gamma);
        for s in 0..2 {
            let stay = m.idx(s, 0, s);
            let switch = m.idx(s, 1, 1 - s);
            m.transition[stay] = 1.0;
            m.transition[switch] = 1.0;
            m.reward[stay] = 1.0;
            m.costs[0][switch] = 1.0;
        }
        m.initial_dist = vec![0.5, 0.5];
        m.cost_limits[0] = 1.0;
        m
    }
}
