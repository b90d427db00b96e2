use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("grid layout has no hazard-free path from start to goal")]
    BlockedGrid,

    #[error("training diverged at epoch {epoch}: non-finite policy logits")]
    Divergence { epoch: usize },

    #[error("model is infeasible: {0}")]
    Infeasible(InfeasibilityCertificate),

    #[error("linear program is unbounded")]
    Unbounded,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("bisection bracket invalid: cost {cost} at lambda {lambda} still exceeds limit {limit}")]
    BracketTooLow { lambda: f64, cost: f64, limit: f64 },

    #[error("no crossing: cost stays {side} the limit on the whole grid")]
    NoCrossing { side: &'static str },

    #[error("brute force limited to {limit} deterministic policies, model has {count}")]
    TooLarge { count: f64, limit: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Evidence that no policy satisfies the cost limits.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct InfeasibilityCertificate {
    /// Constraint whose minimum achievable cost exceeds its limit, when a
    /// single constraint is responsible.
    pub constraint: Option<usize>,
    pub min_cost: Option<f64>,
    pub limit: Option<f64>,
    /// Optimal phase-one objective (total artificial mass) of the LP.
    pub phase_one_residual: f64,
}

impl std::fmt::Display for InfeasibilityCertificate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match (self.constraint, self.min_cost, self.limit) {
            (Some(i), Some(c), Some(d)) => write!(
                f,
                "constraint {i}: minimum achievable cost {c:.6} exceeds limit {d:.6}"
            ),
            _ => write!(
                f,
                "cost constraints jointly infeasible (phase-one residual {:.3e})",
                self.phase_one_residual
            ),
        }
    }
}
