//! Tabular constrained-MDP laboratory: exact models and evaluation,
//! Lagrange-multiplier controllers, a two-timescale PPO-Lagrangian trainer,
//! a linear-programming oracle, and experiment drivers.

pub mod dp;
pub mod envs;
pub mod error;
pub mod harness;
pub mod model;
pub mod multiplier;
pub mod oracle;
pub mod sampling;
pub mod trainer;

pub use error::{Error, InfeasibilityCertificate, Result};
pub use model::{CmdpModel, OccupancyMeasure, PolicyTable, Signal, ValueTable};
pub use multiplier::{ControllerConfig, ControllerKind, ControllerState};
pub use oracle::OracleSolution;
pub use trainer::{RunRecord, TrainConfig, TrainMode};
