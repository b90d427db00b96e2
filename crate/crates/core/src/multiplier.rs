//! Lagrange multiplier update rules: fixed, gradient ascent and PID.
//!
//! Each rule is a pure function from controller state and one epoch's cost
//! observation to the next controller state.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Fixed,
    Ga,
    Pid,
}

/// Controller hyperparameters. Defaults are the PPO-Lag / CPPO-PID settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub kind: ControllerKind,
    pub fixed_lambda: f64,
    /// Gradient-ascent step size.
    pub eta: f64,
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Lag, in epochs, of the cost the derivative term compares against.
    pub d_delay: usize,
    /// Smoothing of the proportional and derivative inputs.
    pub ema_alpha: f64,
    /// Upper clamp on the PID output; `None` disables it.
    pub penalty_max: Option<f64>,
    pub lambda_init: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            kind: ControllerKind::Ga,
            fixed_lambda: 0.0,
            eta: 0.035,
            kp: 1e-4,
            ki: 1e-4,
            kd: 0.0,
            d_delay: 10,
            ema_alpha: 0.95,
            penalty_max: Some(100.0),
            lambda_init: 0.001,
        }
    }
}

impl ControllerConfig {
    pub fn fixed(lambda: f64) -> Self {
        Self {
            kind: ControllerKind::Fixed,
            fixed_lambda: lambda,
            ..Self::default()
        }
    }

    pub fn ga(eta: f64) -> Self {
        Self {
            kind: ControllerKind::Ga,
            eta,
            ..Self::default()
        }
    }

    pub fn pid(kp: f64, ki: f64, kd: f64) -> Self {
        Self {
            kind: ControllerKind::Pid,
            kp,
            ki,
            kd,
            ..Self::default()
        }
    }

    /// Returns the first violated parameter constraint, if any.
    pub fn validate(&self) -> Result<(), String> {
        let named = [
            ("eta", self.eta),
            ("kp", self.kp),
            ("ki", self.ki),
            ("kd", self.kd),
            ("lambda_init", self.lambda_init),
            ("fixed_lambda", self.fixed_lambda),
        ];
        for (name, value) in named {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(format!("{name} must be a finite non-negative number, got {value}"));
            }
        }
        if !(0.0..1.0).contains(&self.ema_alpha) {
            return Err(format!("ema_alpha must lie in [0, 1), got {}", self.ema_alpha));
        }
        if let Some(cap) = self.penalty_max {
            if !(cap >= 0.0) {
                return Err(format!("penalty_max must be non-negative, got {cap}"));
            }
        }
        Ok(())
    }
}

/// One epoch's constraint reading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PenaltyObservation {
    pub cost_estimate: f64,
    pub cost_limit: f64,
    pub epoch_index: usize,
}

/// Penalty loss `xi = J_C - d`; positive when the budget is exceeded.
pub fn penalty_loss(obs: &PenaltyObservation) -> f64 {
    obs.cost_estimate - obs.cost_limit
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControllerState {
    pub lambda: f64,
    pub integral: f64,
    /// Smoothed derivative input.
    pub prev_cost_ema: f64,
    /// Recent cost estimates, oldest first, at most `d_delay + 1` long.
    pub delayed_costs: VecDeque<f64>,
    /// Smoothed proportional input.
    pub p_ema: f64,
    pub config: ControllerConfig,
}

impl ControllerState {
    pub fn new(config: ControllerConfig) -> Self {
        let lambda = match config.kind {
            ControllerKind::Fixed => config.fixed_lambda,
            _ => config.lambda_init,
        };
        Self {
            lambda,
            integral: 0.0,
            prev_cost_ema: 0.0,
            delayed_costs: VecDeque::with_capacity(config.d_delay + 1),
            p_ema: 0.0,
            config,
        }
    }

    /// Advances the controller by one epoch using its configured rule.
    pub fn step(&self, obs: &PenaltyObservation) -> Self {
        match self.config.kind {
            ControllerKind::Fixed => fixed_step(self, obs),
            ControllerKind::Ga => ga_step(self, obs),
            ControllerKind::Pid => pid_step(self, obs),
        }
    }
}

/// Projected gradient ascent: `lambda' = max(0, lambda + eta * xi)`.
///
/// Uncapped: `penalty_max` only limits the PID output.
pub fn ga_step(state: &ControllerState, obs: &PenaltyObservation) -> ControllerState {
    let xi = penalty_loss(obs);
    ControllerState {
        lambda: (state.lambda + state.config.eta * xi).max(0.0),
        ..state.clone()
    }
}

/// PID rule. The multiplier is recomputed from the three terms each epoch:
///
/// 1. the cost estimate joins the delay buffer;
/// 2. the proportional input is an EMA of `xi`;
/// 3. the integral accumulates `xi` and is clamped at zero;
/// 4. the derivative is the positive part of the rise in cost over the last
///    `d_delay` epochs (zero until the buffer is full), then EMA-smoothed;
/// 5. `lambda' = clamp(kp * p + ki * I + kd * D, 0, penalty_max)`.
pub fn pid_step(state: &ControllerState, obs: &PenaltyObservation) -> ControllerState {
    let cfg = &state.config;
    let xi = penalty_loss(obs);
    let mut delayed = state.delayed_costs.clone();
    delayed.push_back(obs.cost_estimate);
    while delayed.len() > cfg.d_delay + 1 {
        delayed.pop_front();
    }
    let p_ema = cfg.ema_alpha * state.p_ema + (1.0 - cfg.ema_alpha) * xi;
    let integral = (state.integral + xi).max(0.0);
    let raw_derivative = if delayed.len() == cfg.d_delay + 1 {
        (obs.cost_estimate - delayed[0]).max(0.0)
    } else {
        0.0
    };
    let d_ema = cfg.ema_alpha * state.prev_cost_ema + (1.0 - cfg.ema_alpha) * raw_derivative;
    let output = cfg.kp * p_ema + cfg.ki * integral + cfg.kd * d_ema;
    let lambda = match cfg.penalty_max {
        Some(cap) => output.clamp(0.0, cap),
        None => output.max(0.0),
    };
    ControllerState {
        lambda,
        integral,
        prev_cost_ema: d_ema,
        delayed_costs: delayed,
        p_ema,
        config: cfg.clone(),
    }
}

/// The multiplier never moves.
pub fn fixed_step(state: &ControllerState, _obs: &PenaltyObservation) -> ControllerState {
    state.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn obs(cost: f64, limit: f64, k: usize) -> PenaltyObservation {
        PenaltyObservation {
            cost_estimate: cost,
            cost_limit: limit,
            epoch_index: k,
        }
    }

    fn with_lambda(config: ControllerConfig, lambda: f64) -> ControllerState {
        ControllerState {
            lambda,
            ..ControllerState::new(config)
        }
    }

    #[test]
    fn penalty_loss_is_cost_minus_limit() {
        assert_eq!(penalty_loss(&obs(30.0, 25.0, 0)), 5.0);
        assert_eq!(penalty_loss(&obs(25.0, 25.0, 0)), 0.0);
        assert_eq!(penalty_loss(&obs(20.0, 25.0, 0)), -5.0);
    }

    #[test]
    fn ga_step_arithmetic() {
        let s = ga_step(&with_lambda(ControllerConfig::ga(0.035), 0.5), &obs(35.0, 25.0, 0));
        assert!((s.lambda - 0.85).abs() < 1e-12);
        let s = ga_step(&with_lambda(ControllerConfig::ga(0.035), 0.1), &obs(15.0, 25.0, 0));
        assert_eq!(s.lambda, 0.0);
        let s = ga_step(&with_lambda(ControllerConfig::ga(0.035), 0.0), &obs(25.0, 25.0, 0));
        assert_eq!(s.lambda, 0.0);
    }

    fn pid_no_ema(kp: f64, ki: f64, kd: f64, d_delay: usize) -> ControllerConfig {
        ControllerConfig {
            ema_alpha: 0.0,
            d_delay,
            ..ControllerConfig::pid(kp, ki, kd)
        }
    }

    #[test]
    fn pid_first_epoch_arithmetic() {
        let s = ControllerState::new(pid_no_ema(1e-4, 1e-4, 0.0, 10));
        let s = pid_step(&s, &obs(35.0, 25.0, 0));
        assert_eq!(s.integral, 10.0);
        assert!((s.lambda - 2e-3).abs() < 1e-15);
    }

    #[test]
    fn pid_stays_at_zero_for_non_positive_penalties() {
        let mut s = ControllerState::new(ControllerConfig {
            lambda_init: 0.0,
            ..ControllerConfig::pid(1e-4, 1e-4, 0.0)
        });
        for k in 0..50 {
            s = pid_step(&s, &obs(25.0 - (k % 7) as f64, 25.0, k));
            assert_eq!(s.integral, 0.0);
            assert_eq!(s.lambda, 0.0);
        }
    }

    #[test]
    fn pid_derivative_arithmetic() {
        let s = ControllerState::new(pid_no_ema(1e-4, 1e-4, 1e-3, 1));
        let s = pid_step(&s, &obs(20.0, 25.0, 0));
        assert_eq!(s.lambda, 0.0);
        let s = pid_step(&s, &obs(30.0, 25.0, 1));
        assert_eq!(s.integral, 5.0);
        assert!((s.lambda - 0.011).abs() < 1e-15, "{}", s.lambda);
    }

    #[test]
    fn pid_derivative_waits_for_a_full_buffer() {
        let mut s = ControllerState::new(pid_no_ema(0.0, 0.0, 1.0, 3));
        for (k, cost) in [10.0, 20.0, 30.0].into_iter().enumerate() {
            s = pid_step(&s, &obs(cost, 100.0, k));
            assert_eq!(s.lambda, 0.0);
        }
        s = pid_step(&s, &obs(40.0, 100.0, 3));
        assert_eq!(s.lambda, 30.0);
        assert_eq!(s.delayed_costs.len(), 4);
    }

    #[test]
    fn pid_output_is_capped() {
        let s = ControllerState::new(ControllerConfig {
            penalty_max: Some(0.5),
            ..pid_no_ema(1.0, 1.0, 0.0, 10)
        });
        assert_eq!(pid_step(&s, &obs(100.0, 0.0, 0)).lambda, 0.5);
    }

    #[test]
    fn fixed_controller_never_moves() {
        let s = ControllerState::new(ControllerConfig::fixed(2.0));
        assert_eq!(s.lambda, 2.0);
        assert_eq!(fixed_step(&s, &obs(1e6, 0.0, 0)).lambda, 2.0);
        let zero = ControllerState::new(ControllerConfig::fixed(0.0));
        assert_eq!(zero.step(&obs(50.0, 25.0, 0)).lambda, 0.0);
        let mut s2 = s.clone();
        for k in 0..1000 {
            s2 = s2.step(&obs((k as f64 * 7.3) % 50.0, 25.0, k));
        }
        assert_eq!(s2, s);
    }

    #[test]
    fn config_validation() {
        assert!(ControllerConfig::default().validate().is_ok());
        assert!(ControllerConfig::ga(-1.0).validate().is_err());
        let bad = ControllerConfig {
            ema_alpha: 1.0,
            ..ControllerConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_json_keys() {
        let json = serde_json::to_value(ControllerConfig::default()).unwrap();
        let mut keys: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "d_delay", "ema_alpha", "eta", "fixed_lambda", "kd", "ki", "kind", "kp",
                "lambda_init", "penalty_max"
            ]
        );
        let partial: ControllerConfig = serde_json::from_str(r#"{"kind": "pid", "kp": 0.5}"#).unwrap();
        assert_eq!(partial.kind, ControllerKind::Pid);
        assert_eq!(partial.kp, 0.5);
        assert_eq!(partial.d_delay, 10);
        assert!(serde_json::from_str::<ControllerConfig>(r#"{"gain": 1}"#).is_err());
    }

    fn all_kinds() -> Vec<ControllerConfig> {
        vec![
            ControllerConfig::fixed(0.3),
            ControllerConfig::ga(0.035),
            ControllerConfig::pid(1e-4, 1e-4, 0.0),
            ControllerConfig::pid(0.05, 0.01, 0.2),
        ]
    }

    proptest! {
        #[test]
        fn multiplier_and_integral_stay_non_negative(
            costs in proptest::collection::vec(-50.0f64..150.0, 1..200),
        ) {
            for cfg in all_kinds() {
                let mut s = ControllerState::new(cfg);
                for (k, &c) in costs.iter().enumerate() {
                    s = s.step(&obs(c, 25.0, k));
                    prop_assert!(s.lambda >= 0.0);
                    prop_assert!(s.integral >= 0.0);
                    if s.config.kind == ControllerKind::Pid {
                        prop_assert!(s.lambda <= s.config.penalty_max.unwrap());
                    }
                }
            }
        }

        #[test]
        fn larger_penalty_never_lowers_lambda(
            history in proptest::collection::vec(0.0f64..60.0, 0..30),
            c1 in 0.0f64..60.0,
            bump in 0.0f64..30.0,
        ) {
            for cfg in all_kinds() {
                let mut s = ControllerState::new(cfg);
                for (k, &c) in history.iter().enumerate() {
                    s = s.step(&obs(c, 25.0, k));
                }
                let k = history.len();
                let low = s.step(&obs(c1, 25.0, k)).lambda;
                let high = s.step(&obs(c1 + bump, 25.0, k)).lambda;
                prop_assert!(high >= low, "{:?}: {} < {}", s.config.kind, high, low);
            }
        }

        #[test]
        fn pid_with_integral_gain_only_reproduces_gradient_ascent(
            xis in proptest::collection::vec(-5.0f64..20.0, 1..300),
        ) {
            let eta = 0.035;
            let ga_cfg = ControllerConfig { lambda_init: 0.0, ..ControllerConfig::ga(eta) };
            let pid_cfg = ControllerConfig {
                kp: 0.0,
                ki: eta,
                kd: 0.0,
                ema_alpha: 0.0,
                penalty_max: None,
                lambda_init: 0.0,
                kind: ControllerKind::Pid,
                ..ControllerConfig::default()
            };
            let (mut ga, mut pid) = (ControllerState::new(ga_cfg), ControllerState::new(pid_cfg));
            let mut partial = 0.0;
            for (k, &xi) in xis.iter().enumerate() {
                // Keep running sums non-negative so no projection differs.
                if partial + xi < 0.0 {
                    break;
                }
                partial += xi;
                let o = obs(25.0 + xi, 25.0, k);
                ga = ga_step(&ga, &o);
                pid = pid_step(&pid, &o);
                prop_assert!((ga.lambda - pid.lambda).abs() <= 1e-12, "epoch {}: {} vs {}", k, ga.lambda, pid.lambda);
            }
        }
    }
}
