//! Torque-limited pendulum with per-episode randomized dynamics.
//!
//! Angle convention: θ = 0 is upright, θ = π hangs down. The privileged
//! state is the offset vector (δ_dt, δ_g, δ_m, δ_l) drawn at reset.

use std::f64::consts::PI;

use numcore::RngStream;
use serde::{Deserialize, Serialize};

use super::{Env, OracleState, Step, Tier};
use crate::error::{invalid, Result};

pub const NOMINAL_DT: f64 = 0.05;
pub const NOMINAL_G: f64 = 10.0;
pub const NOMINAL_M: f64 = 1.0;
pub const NOMINAL_L: f64 = 1.0;
const MAX_TORQUE: f64 = 2.0;
/// Physical constants never drop below this fraction of nominal.
const MIN_SCALE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }
}

/// Offset intervals per tier, ordered (δ_dt, δ_g, δ_m, δ_l).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomizationRange {
    pub ordinary: [Interval; 4],
    pub ood: [Interval; 4],
    pub far_ood: [Interval; 4],
}

impl Default for RandomizationRange {
    fn default() -> Self {
        let i = Interval::new;
        Self {
            ordinary: [i(0.0, 0.05), i(-2.0, 2.0), i(-0.5, 0.5), i(-0.5, 0.5)],
            ood: [i(0.0, 0.1), i(-3.0, 3.0), i(-0.8, 0.8), i(-0.8, 0.8)],
            far_ood: [i(0.0, 0.2), i(-4.0, 4.0), i(-0.9, 1.5), i(-0.9, 1.5)],
        }
    }
}

impl RandomizationRange {
    pub fn tier(&self, tier: Tier) -> &[Interval; 4] {
        match tier {
            Tier::Ordinary => &self.ordinary,
            Tier::Ood => &self.ood,
            Tier::FarOod => &self.far_ood,
        }
    }

    /// Every interval is ordered and the tiers nest componentwise.
    pub fn validate(&self) -> Result<()> {
        for tier in Tier::ALL {
            for (j, iv) in self.tier(tier).iter().enumerate() {
                if !(iv.lo.is_finite() && iv.hi.is_finite() && iv.lo <= iv.hi) {
                    return Err(invalid("randomization range", format!("{tier} component {j}: [{}, {}]", iv.lo, iv.hi)));
                }
            }
        }
        for j in 0..4 {
            if !self.ood[j].contains_interval(&self.ordinary[j]) || !self.far_ood[j].contains_interval(&self.ood[j]) {
                return Err(invalid("randomization range", format!("component {j} does not nest across tiers")));
            }
        }
        Ok(())
    }

    pub fn sample(&self, tier: Tier, rng: &mut RngStream) -> [f64; 4] {
        let b = self.tier(tier);
        [
            rng.uniform(b[0].lo, b[0].hi),
            rng.uniform(b[1].lo, b[1].hi),
            rng.uniform(b[2].lo, b[2].hi),
            rng.uniform(b[3].lo, b[3].hi),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PendulumParams {
    pub dt: f64,
    pub g: f64,
    pub m: f64,
    pub l: f64,
}

impl PendulumParams {
    pub const NOMINAL: PendulumParams = PendulumParams { dt: NOMINAL_DT, g: NOMINAL_G, m: NOMINAL_M, l: NOMINAL_L };

    pub fn from_offsets(d: &[f64; 4]) -> Self {
        let scaled = |nominal: f64, delta: f64| (nominal * (1.0 + delta)).max(MIN_SCALE * nominal);
        Self {
            dt: NOMINAL_DT + d[0],
            g: scaled(NOMINAL_G, d[1]),
            m: scaled(NOMINAL_M, d[2]),
            l: scaled(NOMINAL_L, d[3]),
        }
    }

    /// `3g / 2l`, the gravity term of the angular acceleration.
    pub fn gravity_coef(&self) -> f64 {
        3.0 * self.g / (2.0 * self.l)
    }

    pub fn torque_coef(&self) -> f64 {
        3.0 / (self.m * self.l * self.l)
    }
}

pub fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

#[derive(Clone, Debug)]
pub struct Pendulum {
    pub range: RandomizationRange,
    pub episode_len: usize,
    /// Angular speed clip; `None` integrates the raw ODE.
    pub max_speed: Option<f64>,
    params: PendulumParams,
    offsets: [f64; 4],
    theta: f64,
    theta_dot: f64,
    t: usize,
}

impl Pendulum {
    pub fn new(range: RandomizationRange, episode_len: usize, max_speed: Option<f64>) -> Result<Self> {
        range.validate()?;
        if episode_len == 0 {
            return Err(invalid("episode length", "must be positive"));
        }
        Ok(Self {
            range,
            episode_len,
            max_speed,
            params: PendulumParams::NOMINAL,
            offsets: [0.0; 4],
            theta: PI,
            theta_dot: 0.0,
            t: 0,
        })
    }

    pub fn params(&self) -> PendulumParams {
        self.params
    }

    pub fn angle(&self) -> (f64, f64) {
        (self.theta, self.theta_dot)
    }

    /// Places the pendulum at an explicit state with explicit offsets.
    pub fn set_state(&mut self, theta: f64, theta_dot: f64, offsets: [f64; 4]) {
        self.offsets = offsets;
        self.params = PendulumParams::from_offsets(&offsets);
        self.theta = theta;
        self.theta_dot = theta_dot;
        self.t = 0;
    }

    pub fn observe(&self) -> OracleState {
        OracleState {
            local: vec![self.theta.cos(), self.theta.sin(), self.theta_dot],
            privileged: self.offsets.to_vec(),
        }
    }

    /// Reward of taking torque `u` in the current state.
    pub fn reward(&self, u: f64) -> f64 {
        let th = wrap_angle(self.theta);
        -(th * th + 0.1 * self.theta_dot * self.theta_dot + 0.001 * u * u)
    }

    /// One semi-implicit Euler step; returns the reward of the pre-step state.
    pub fn integrate(&mut self, u: f64) -> f64 {
        let p = self.params;
        let reward = self.reward(u);
        let acc = p.gravity_coef() * self.theta.sin() + p.torque_coef() * u;
        self.theta_dot += acc * p.dt;
        if let Some(ms) = self.max_speed {
            self.theta_dot = self.theta_dot.clamp(-ms, ms);
        }
        self.theta += self.theta_dot * p.dt;
        reward
    }
}

impl Env for Pendulum {
    fn local_dim(&self) -> usize {
        3
    }

    fn priv_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn action_bounds(&self) -> (f64, f64) {
        (-MAX_TORQUE, MAX_TORQUE)
    }

    fn max_steps(&self) -> usize {
        self.episode_len
    }

    fn reset(&mut self, tier: Tier, rng: &mut RngStream) -> Result<OracleState> {
        let offsets = self.range.sample(tier, rng);
        let theta = rng.uniform(-PI, PI);
        let theta_dot = rng.uniform(-1.0, 1.0);
        self.set_state(theta, theta_dot, offsets);
        Ok(self.observe())
    }

    fn step(&mut self, action: &[f64]) -> Result<Step> {
        if action.len() != 1 {
            return Err(invalid("action", format!("pendulum takes one torque, got {}", action.len())));
        }
        if !action[0].is_finite() {
            return Err(invalid("action", format!("non-finite torque {}", action[0])));
        }
        let u = action[0].clamp(-MAX_TORQUE, MAX_TORQUE);
        let reward = self.integrate(u);
        self.t += 1;
        Ok(Step { state: self.observe(), reward, truncated: self.t >= self.episode_len })
    }

    fn raw_privilege(&self) -> Vec<f64> {
        self.offsets.to_vec()
    }
}
