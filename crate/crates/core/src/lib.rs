//! Privileged-knowledge distillation for reinforcement learning through a
//! historical information bottleneck, with the baselines it is compared
//! against and finite-MDP checks of the value-discrepancy bounds.

pub mod agent;
pub mod baselines;
pub mod envs;
pub mod error;
pub mod harness;
pub mod hib;
pub mod nets;
pub mod theory;

pub use error::{HibError, Result};
