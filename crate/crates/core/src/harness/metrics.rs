//! Summary statistics over per-epoch training curves.

use serde::Serialize;

use crate::error::{Error, Result};

/// Mean of the last `ceil(fraction * len)` entries. `None` for an empty
/// series or a fraction outside `(0, 1]`.
pub fn tail_average(series: &[f64], fraction: f64) -> Option<f64> {
    if series.is_empty() || !(fraction > 0.0 && fraction <= 1.0) {
        return None;
    }
    let k = ((fraction * series.len() as f64).ceil() as usize).clamp(1, series.len());
    let tail = &series[series.len() - k..];
    Some(tail.iter().sum::<f64>() / k as f64)
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Reporting-only exponential smoothing: `y_0 = x_0`,
/// `y_k = alpha y_{k-1} + (1 - alpha) x_k`.
pub fn smooth(series: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(series.len());
    for (k, &x) in series.iter().enumerate() {
        let y = if k == 0 { x } else { alpha * out[k - 1] + (1.0 - alpha) * x };
        out.push(y);
    }
    out
}

fn first_satisfaction(costs: &[f64], limit: f64) -> Option<usize> {
    costs.iter().position(|&c| c <= limit)
}

/// Fraction of epochs after the first one with `cost <= limit` whose cost
/// exceeds the limit. `None` if the limit is never met or only met on the
/// final epoch.
pub fn violation_rate_after_first_satisfaction(costs: &[f64], limit: f64) -> Option<f64> {
    let k0 = first_satisfaction(costs, limit)?;
    let rest = &costs[k0 + 1..];
    if rest.is_empty() {
        return None;
    }
    let violations = rest.iter().filter(|&&c| c > limit).count();
    Some(violations as f64 / rest.len() as f64)
}

/// Best `(epoch, return)` among epochs at or after the first satisfaction
/// whose cost is within the limit.
pub fn best_return_under_constraint(returns: &[f64], costs: &[f64], limit: f64) -> Option<(usize, f64)> {
    assert_eq!(returns.len(), costs.len(), "returns and costs must align");
    let k0 = first_satisfaction(costs, limit)?;
    let mut best: Option<(usize, f64)> = None;
    for k in k0..costs.len() {
        if costs[k] <= limit && best.is_none_or(|(_, r)| returns[k] > r) {
            best = Some((k, returns[k]));
        }
    }
    best
}

/// Estimated optimal multiplier read off a profile's cost curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LambdaStarEstimate {
    pub lambda: f64,
    /// The constraint is already satisfied at the smallest grid value.
    pub inactive: bool,
}

/// Linear interpolation at the first downward crossing of `costs` through
/// `limit`. `points` are `(lambda, cost)` sorted by lambda.
pub fn interpolate_crossing(points: &[(f64, f64)], limit: f64) -> Result<LambdaStarEstimate> {
    if points.len() < 2 {
        return Err(Error::InvalidArgument("profile needs at least two points".into()));
    }
    if points[0].1 <= limit {
        return Ok(LambdaStarEstimate {
            lambda: 0.0,
            inactive: true,
        });
    }
    for w in points.windows(2) {
        let ((l0, c0), (l1, c1)) = (w[0], w[1]);
        if c0 > limit && c1 <= limit {
            let t = (c0 - limit) / (c0 - c1);
            return Ok(LambdaStarEstimate {
                lambda: l0 + t * (l1 - l0),
                inactive: false,
            });
        }
    }
    Err(Error::NoCrossing { side: "above" })
}
