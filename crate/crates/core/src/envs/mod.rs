//! Environments whose state splits into a local part the agent always sees
//! and a privileged part that only the simulator knows.

mod finite;
mod highdim;
mod pendulum;

use std::fmt;
use std::str::FromStr;

use numcore::RngStream;
use serde::{Deserialize, Serialize};

use crate::error::{HibError, Result};

pub use finite::{gen_finite_mdp, FiniteMdp, FiniteMdpSpec};
pub use highdim::HighDimPrivilege;
pub use pendulum::{Interval, Pendulum, PendulumParams, RandomizationRange, NOMINAL_DT, NOMINAL_G, NOMINAL_L, NOMINAL_M};

/// Randomization difficulty used at reset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Ordinary,
    Ood,
    FarOod,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Ordinary, Tier::Ood, Tier::FarOod];

    pub fn name(self) -> &'static str {
        match self {
            Tier::Ordinary => "ordinary",
            Tier::Ood => "ood",
            Tier::FarOod => "far_ood",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tier {
    type Err = HibError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ordinary" => Ok(Tier::Ordinary),
            "ood" => Ok(Tier::Ood),
            "far_ood" => Ok(Tier::FarOod),
            other => Err(HibError::UnknownTier(other.to_string())),
        }
    }
}

/// `[s^l ‖ s^p]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleState {
    pub local: Vec<f64>,
    pub privileged: Vec<f64>,
}

impl OracleState {
    pub fn concat(&self) -> Vec<f64> {
        let mut v = self.local.clone();
        v.extend_from_slice(&self.privileged);
        v
    }
}

#[derive(Clone, Debug)]
pub struct Step {
    pub state: OracleState,
    pub reward: f64,
    /// Episode hit its step limit. Never a true terminal state.
    pub truncated: bool,
}

pub trait Env {
    fn local_dim(&self) -> usize;
    fn priv_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Symmetric per-coordinate bounds `(low, high)` of the action box.
    fn action_bounds(&self) -> (f64, f64);
    fn max_steps(&self) -> usize;
    fn reset(&mut self, tier: Tier, rng: &mut RngStream) -> Result<OracleState>;
    fn step(&mut self, action: &[f64]) -> Result<Step>;
    /// Dynamics offsets of the current episode, before any embedding.
    fn raw_privilege(&self) -> Vec<f64>;
}
