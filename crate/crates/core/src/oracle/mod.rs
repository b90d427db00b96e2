//! Exact constrained optima: the occupancy-measure linear program, the
//! Lagrangian dual function, dual bisection, and brute-force enumeration.

mod lp;

use serde::Serialize;

pub use lp::{LinearProgram, LpFailure, LpSolution, Row, RowKind};

use crate::dp::{deterministic_policies, value_iteration};
use crate::envs::min_cost;
use crate::error::{Error, InfeasibilityCertificate, Result};
use crate::model::{
    evaluate, occupancy_from_policy, policy_from_occupancy, start_value, CmdpModel,
    OccupancyMeasure, PolicyTable, Signal,
};
use crate::trainer::shaped_signal;

/// Largest number of deterministic policies `brute_force` will enumerate.
pub const BRUTE_FORCE_LIMIT: usize = 4096;
/// Value-iteration tolerance used inside the dual oracles.
const DUAL_VI_TOL: f64 = 1e-11;
const KKT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct OracleSolution {
    pub optimal_return: f64,
    pub optimal_cost: Vec<f64>,
    pub occupancy: OccupancyMeasure,
    pub lambda_star: Vec<f64>,
    pub constraint_active: Vec<bool>,
    pub policy: PolicyTable,
    /// Largest KKT violation found by the post-hoc check (0 for enumeration).
    pub kkt_residual: f64,
}

fn certificate(model: &CmdpModel, phase_one_residual: f64) -> InfeasibilityCertificate {
    for i in 0..model.n_constraints() {
        if let Ok(c) = min_cost(model, i) {
            if c > model.cost_limits[i] {
                return InfeasibilityCertificate {
                    constraint: Some(i),
                    min_cost: Some(c),
                    limit: Some(model.cost_limits[i]),
                    phase_one_residual,
                };
            }
        }
    }
    InfeasibilityCertificate {
        constraint: None,
        min_cost: None,
        limit: None,
        phase_one_residual,
    }
}

fn is_active(cost: f64, limit: f64) -> bool {
    cost >= limit - 1e-7 * (1.0 + limit.abs())
}

/// Solves `max <mu, r> s.t. flow(mu) = p0, <mu, c_i> <= d_i, mu >= 0`.
///
/// `lambda_star` holds the optimal duals of the cost rows. The solution is
/// checked against the KKT conditions before it is returned.
pub fn solve_lp(model: &CmdpModel) -> Result<OracleSolution> {
    model.ensure_valid()?;
    let (ns, na, gamma) = (model.n_states, model.n_actions, model.gamma);
    let n = ns * na;
    let r_bar = model.expected_signal(&model.reward);
    let c_bar: Vec<Vec<f64>> = model.costs.iter().map(|c| model.expected_signal(c)).collect();

    let mut rows = Vec::with_capacity(ns + c_bar.len());
    for t in 0..ns {
        let mut coeffs = vec![0.0; n];
        for s in 0..ns {
            for a in 0..na {
                let mut v = -gamma * model.p(s, a, t);
                if s == t {
                    v += 1.0;
                }
                coeffs[s * na + a] = v;
            }
        }
        rows.push(Row {
            coeffs,
            kind: RowKind::Eq,
            rhs: model.initial_dist[t],
        });
    }
    for (c, &d) in c_bar.iter().zip(&model.cost_limits) {
        rows.push(Row {
            coeffs: c.clone(),
            kind: RowKind::Le,
            rhs: d,
        });
    }
    let program = LinearProgram {
        objective: r_bar.clone(),
        rows,
    };
    let sol = match program.solve() {
        Ok(s) => s,
        Err(LpFailure::Infeasible { phase_one_residual }) => {
            return Err(Error::Infeasible(certificate(model, phase_one_residual)))
        }
        Err(e) => return Err(e.into()),
    };

    let occupancy = OccupancyMeasure {
        n_states: ns,
        n_actions: na,
        mu: sol.x.clone(),
    };
    let optimal_cost: Vec<f64> = c_bar.iter().map(|c| occupancy.dot(c)).collect();
    let lambda_star: Vec<f64> = sol.duals[ns..].iter().map(|y| y.max(0.0)).collect();
    let values = &sol.duals[..ns];

    // Post-hoc KKT check: primal feasibility, dual feasibility, complementary
    // slackness, and a zero duality gap.
    let mut kkt: f64 = occupancy.flow_residual(model);
    for (i, &d) in model.cost_limits.iter().enumerate() {
        kkt = kkt.max(optimal_cost[i] - d);
        kkt = kkt.max((lambda_star[i] * (optimal_cost[i] - d)).abs());
        kkt = kkt.max(-sol.duals[ns + i]);
    }
    for s in 0..ns {
        for a in 0..na {
            let future: f64 = model.row(s, a).iter().zip(values).map(|(p, v)| p * v).sum();
            let penalty: f64 = lambda_star
                .iter()
                .zip(&c_bar)
                .map(|(l, c)| l * c[s * na + a])
                .sum();
            let reduced = r_bar[s * na + a] - penalty - (values[s] - gamma * future);
            kkt = kkt.max(reduced);
        }
    }
    let dual_objective = start_value(model, values)
        + lambda_star
            .iter()
            .zip(&model.cost_limits)
            .map(|(l, d)| l * d)
            .sum::<f64>();
    let scale = 1.0 + sol.objective.abs();
    kkt = kkt.max((dual_objective - sol.objective).abs() / scale);
    if kkt > KKT_TOL {
        return Err(Error::Numerical(format!("LP solution fails KKT check (residual {kkt:.3e})")));
    }

    Ok(OracleSolution {
        optimal_return: sol.objective,
        constraint_active: optimal_cost
            .iter()
            .zip(&model.cost_limits)
            .map(|(c, d)| is_active(*c, *d))
            .collect(),
        optimal_cost,
        policy: policy_from_occupancy(&occupancy),
        occupancy,
        lambda_star,
        kkt_residual: kkt.max(0.0),
    })
}

fn greedy_for(model: &CmdpModel, lambda: &[f64], tol: f64) -> Result<PolicyTable> {
    let shaped = shaped_signal(model, lambda)?;
    Ok(value_iteration(model, &shaped, tol).1)
}

/// `D(lambda) = max_pi L(pi, lambda)`: the optimal value of the shaped
/// reward plus `sum_i lambda_i d_i`. The greedy policy is evaluated exactly,
/// so `tol` only affects which policy is selected.
pub fn dual_function(model: &CmdpModel, lambda: &[f64], tol: f64) -> Result<f64> {
    let shaped = shaped_signal(model, lambda)?;
    let (_, pi) = value_iteration(model, &shaped, tol);
    let expected = model.expected_signal(&shaped);
    let v = crate::model::evaluate_expected(model, &pi, &expected, model.gamma, Signal::Reward)?;
    let constant: f64 = lambda.iter().zip(&model.cost_limits).map(|(l, d)| l * d).sum();
    Ok(start_value(model, &v.v) + constant)
}

/// Costs within this relative distance of the limit count as meeting it, so
/// policy-invariant costs do not send the bracketing off to huge multipliers.
const LIMIT_RTOL: f64 = 1e-10;

fn meets_limit(cost: f64, limit: f64) -> bool {
    cost <= limit + LIMIT_RTOL * limit.abs().max(1.0)
}

fn exact_dual_cost(model: &CmdpModel, lambda: f64) -> Result<f64> {
    let pi = greedy_for(model, &[lambda], DUAL_VI_TOL)?;
    Ok(start_value(model, &evaluate(model, &pi, Signal::Cost(0))?.v))
}

fn require_single_constraint(model: &CmdpModel) -> Result<()> {
    if model.n_constraints() != 1 {
        return Err(Error::Unsupported(format!(
            "single-constraint operation on a model with {} constraints",
            model.n_constraints()
        )));
    }
    Ok(())
}

/// Bracket `[lo, hi]` around the smallest multiplier whose Lagrangian-greedy
/// policy satisfies the limit, narrowed to width below `tol`.
pub fn lambda_star_bracket(model: &CmdpModel, lambda_hi: f64, tol: f64) -> Result<(f64, f64)> {
    require_single_constraint(model)?;
    if !(tol > 0.0) || !(lambda_hi >= 0.0) {
        return Err(Error::InvalidArgument("tol must be positive and lambda_hi non-negative".into()));
    }
    let d = model.cost_limits[0];
    if meets_limit(exact_dual_cost(model, 0.0)?, d) {
        return Ok((0.0, 0.0));
    }
    let cost_hi = exact_dual_cost(model, lambda_hi)?;
    if !meets_limit(cost_hi, d) {
        return Err(Error::BracketTooLow {
            lambda: lambda_hi,
            cost: cost_hi,
            limit: d,
        });
    }
    let (mut lo, mut hi) = (0.0, lambda_hi);
    while hi - lo >= tol {
        let mid = 0.5 * (lo + hi);
        if meets_limit(exact_dual_cost(model, mid)?, d) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok((lo, hi))
}

/// Single-constraint `lambda*` by bisection on the exact-dual cost curve.
pub fn lambda_star_bisection(model: &CmdpModel, lambda_hi: f64, tol: f64) -> Result<f64> {
    let (lo, hi) = lambda_star_bracket(model, lambda_hi, tol)?;
    Ok(0.5 * (lo + hi))
}

/// Doubles an upper bound until the Lagrangian-greedy policy is feasible.
pub fn feasible_lambda_bound(model: &CmdpModel) -> Result<f64> {
    require_single_constraint(model)?;
    let d = model.cost_limits[0];
    let mut hi: f64 = 1.0;
    for _ in 0..60 {
        if meets_limit(exact_dual_cost(model, hi)?, d) {
            return Ok(hi);
        }
        hi *= 2.0;
    }
    Err(Error::Infeasible(certificate(model, f64::NAN)))
}

/// `min_lambda D(lambda)` over a grid plus the bisection point, returning the
/// minimizing multiplier and value.
pub fn minimize_dual(model: &CmdpModel, grid: &[f64], tol: f64) -> Result<(f64, f64)> {
    require_single_constraint(model)?;
    let hi = feasible_lambda_bound(model)?;
    let mut candidates: Vec<f64> = grid.iter().copied().filter(|l| *l >= 0.0).collect();
    candidates.push(lambda_star_bisection(model, hi, tol)?);
    let mut best = (f64::NAN, f64::INFINITY);
    for l in candidates {
        let v = dual_function(model, &[l], DUAL_VI_TOL)?;
        if v < best.1 {
            best = (l, v);
        }
    }
    Ok(best)
}

/// LP and bisection estimates of `lambda*`, with the bisection bracket
/// reported as the canonical interval when they disagree.
#[derive(Debug, Clone, Serialize)]
pub struct LambdaStarReport {
    pub lp: f64,
    pub bisection: f64,
    pub interval: (f64, f64),
    pub degenerate: bool,
}

pub fn lambda_star_report(model: &CmdpModel, tol: f64) -> Result<LambdaStarReport> {
    let lp = solve_lp(model)?;
    let hi = feasible_lambda_bound(model)?;
    let (lo, up) = lambda_star_bracket(model, hi, tol)?;
    let bisection = 0.5 * (lo + up);
    let degenerate = (lp.lambda_star[0] - bisection).abs() > tol.max(1e-4);
    Ok(LambdaStarReport {
        lp: lp.lambda_star[0],
        bisection,
        interval: (lo, up),
        degenerate,
    })
}

struct Candidate {
    occupancy: OccupancyMeasure,
    ret: f64,
    cost: f64,
}

/// Exhaustive oracle: every deterministic policy is evaluated exactly and the
/// best feasible policy or pairwise boundary mixture is returned. Supports
/// zero or one constraint.
pub fn brute_force(model: &CmdpModel) -> Result<OracleSolution> {
    model.ensure_valid()?;
    let m = model.n_constraints();
    if m > 1 {
        return Err(Error::Unsupported("brute force handles at most one constraint".into()));
    }
    let count = (model.n_actions as f64).powi(model.n_states as i32);
    if count > BRUTE_FORCE_LIMIT as f64 {
        return Err(Error::TooLarge {
            count,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let r_bar = model.expected_signal(&model.reward);
    let c_bar = if m == 1 {
        model.expected_signal(&model.costs[0])
    } else {
        vec![0.0; r_bar.len()]
    };
    let d = if m == 1 { model.cost_limits[0] } else { f64::INFINITY };

    let mut cands = Vec::with_capacity(count as usize);
    for actions in deterministic_policies(model.n_states, model.n_actions) {
        let pi = PolicyTable::deterministic(model.n_actions, &actions);
        let occupancy = occupancy_from_policy(model, &pi)?;
        let ret = occupancy.dot(&r_bar);
        let cost = occupancy.dot(&c_bar);
        cands.push(Candidate { occupancy, ret, cost });
    }

    let feasible_tol = 1e-12 * (1.0 + d.abs().min(1e12));
    let (feasible, infeasible): (Vec<&Candidate>, Vec<&Candidate>) =
        cands.iter().partition(|c| c.cost <= d + feasible_tol);
    if feasible.is_empty() {
        let min = cands.iter().map(|c| c.cost).fold(f64::INFINITY, f64::min);
        return Err(Error::Infeasible(InfeasibilityCertificate {
            constraint: Some(0),
            min_cost: Some(min),
            limit: Some(d),
            phase_one_residual: f64::NAN,
        }));
    }

    // (weight on first, first, second)
    let mut best: (f64, f64, &Candidate, &Candidate) = {
        let f = feasible
            .iter()
            .copied()
            .max_by(|a, b| a.ret.total_cmp(&b.ret))
            .expect("non-empty");
        (f.ret, 1.0, f, f)
    };
    for f in &feasible {
        for g in &infeasible {
            if g.ret <= f.ret {
                continue;
            }
            let w = (d - g.cost) / (f.cost - g.cost);
            let value = w * f.ret + (1.0 - w) * g.ret;
            if value > best.0 {
                best = (value, w, f, g);
            }
        }
    }
    let (optimal_return, w, f, g) = best;
    let mu: Vec<f64> = f
        .occupancy
        .mu
        .iter()
        .zip(&g.occupancy.mu)
        .map(|(a, b)| w * a + (1.0 - w) * b)
        .collect();
    let occupancy = OccupancyMeasure {
        n_states: model.n_states,
        n_actions: model.n_actions,
        mu,
    };

    let (optimal_cost, lambda_star, constraint_active) = if m == 1 {
        let cost = w * f.cost + (1.0 - w) * g.cost;
        let lines: Vec<(f64, f64)> = cands.iter().map(|c| (c.cost, c.ret)).collect();
        let lambda = envelope_dual_minimizer(&lines, d);
        (vec![cost], vec![lambda], vec![is_active(cost, d)])
    } else {
        (vec![], vec![], vec![])
    };
    Ok(OracleSolution {
        optimal_return,
        optimal_cost,
        policy: policy_from_occupancy(&occupancy),
        occupancy,
        lambda_star,
        constraint_active,
        kkt_residual: 0.0,
    })
}

/// Smallest minimizer over `lambda >= 0` of
/// `D(lambda) = max_j (r_j - lambda c_j) + lambda d` for policy points
/// `(c_j, r_j)`, via the upper envelope of the lines.
fn envelope_dual_minimizer(points: &[(f64, f64)], d: f64) -> f64 {
    // Lines y = r - lambda c; sort by slope -c ascending, i.e. c descending,
    // keeping the highest intercept per slope.
    let mut lines: Vec<(f64, f64)> = points.to_vec();
    lines.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)));
    lines.dedup_by(|next, prev| next.0 == prev.0);
    let cross = |a: (f64, f64), b: (f64, f64)| (b.1 - a.1) / (b.0 - a.0);
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for line in lines {
        while hull.len() >= 2 {
            let (l1, l2) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            if cross(l1, line) <= cross(l1, l2) {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(line);
    }
    let dual = |lambda: f64| {
        hull.iter()
            .map(|(c, r)| r - lambda * c)
            .fold(f64::NEG_INFINITY, f64::max)
            + lambda * d
    };
    let mut best = (0.0, dual(0.0));
    for w in hull.windows(2) {
        let x = cross(w[0], w[1]);
        if x > 0.0 && x.is_finite() {
            let v = dual(x);
            if v < best.1 - 1e-12 * (1.0 + v.abs()) {
                best = (x, v);
            }
        }
    }
    best.0
}
